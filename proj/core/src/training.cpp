#include "capsroute/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "capsroute/analysis.hpp"
#include "capsroute/serialize.hpp"

namespace capsroute {

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state,
               std::int64_t t, double lr, const AdamParams& hyper) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != grads[k].shape() || state.m[k].shape() != grads[k].shape()) {
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(k) + ": " +
                           shape_string(params[k]->shape()) + " vs gradient " + shape_string(grads[k].shape()));
    }
  }
  const double td = static_cast<double>(t);
  const double correct1 = 1.0 - std::pow(hyper.beta1, td);
  const double correct2 = 1.0 - std::pow(hyper.beta2, td);
  const T b1 = static_cast<T>(hyper.beta1);
  const T b2 = static_cast<T>(hyper.beta2);
  const T step = static_cast<T>(lr / correct1);
  const T inv_c2 = static_cast<T>(1.0 / correct2);
  const T eps = static_cast<T>(hyper.epsilon);
  for (std::size_t k = 0; k < params.size(); ++k) {
    T* p = params[k]->raw();
    T* m = state.m[k].raw();
    T* v = state.v[k].raw();
    const T* g = grads[k].raw();
    const std::size_t n = grads[k].size();
    for (std::size_t e = 0; e < n; ++e) {
      m[e] = b1 * m[e] + (T(1) - b1) * g[e];
      v[e] = b2 * v[e] + (T(1) - b2) * g[e] * g[e];
      p[e] -= step * m[e] / (std::sqrt(v[e] * inv_c2) + eps);
    }
  }
}

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  return cfg.base_lr * std::pow(cfg.lr_decay_rate, static_cast<double>(step) / cfg.decay_step);
}

// ---------------------------------------------------------------------------
// augmentation

namespace {

// Keys cubic convolution (a = -0.5) for taps at offsets -1, 0, 1, 2.
void cubic_weights(double t, double w[4]) {
  constexpr double a = -0.5;
  auto near = [](double d) { return ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0; };
  auto far = [](double d) { return ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a; };
  w[0] = far(1.0 + t);
  w[1] = near(t);
  w[2] = near(1.0 - t);
  w[3] = far(2.0 - t);
}

}  // namespace

void augment_with(std::span<const float> image, std::span<float> out, std::size_t height, std::size_t width, int dx,
                  int dy, double degrees) {
  if (image.size() != height * width || out.size() != image.size()) {
    throw DimensionError("augment: image size does not match " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const auto H = static_cast<long>(height);
  const auto W = static_cast<long>(width);
  auto pixel = [&](long r, long c) -> double {
    if (r < 0 || r >= H || c < 0 || c >= W) return 0.0;
    return image[static_cast<std::size_t>(r * W + c)];
  };
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      // Inverse map: undo the shift, then rotate back by -theta about the centre.
      const double y = static_cast<double>(r - dy) - cy;
      const double x = static_cast<double>(c - dx) - cx;
      const double sx = cs * x + sn * y + cx;
      const double sy = -sn * x + cs * y + cy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const auto x0 = static_cast<long>(fx);
      const auto y0 = static_cast<long>(fy);
      double wx[4], wy[4];
      cubic_weights(sx - fx, wx);
      cubic_weights(sy - fy, wy);
      double v = 0.0;
      for (long m = 0; m < 4; ++m) {
        double row = 0.0;
        for (long n = 0; n < 4; ++n) row += wx[n] * pixel(y0 - 1 + m, x0 - 1 + n);
        v += wy[m] * row;
      }
      out[static_cast<std::size_t>(r * W + c)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

void augment(std::span<const float> image, std::span<float> out, std::size_t height, std::size_t width,
             Augmentation mode, Rng& rng) {
  if (mode == Augmentation::None) {
    if (image.size() != out.size()) throw DimensionError("augment: output size mismatch");
    std::copy(image.begin(), image.end(), out.begin());
    return;
  }
  const int dx = static_cast<int>(rng.below(5)) - 2;
  const int dy = static_cast<int>(rng.below(5)) - 2;
  const double angle = mode == Augmentation::Shift2Rot20 ? rng.uniform(-20.0, 20.0) : 0.0;
  augment_with(image, out, height, width, dx, dy, angle);
}

// ---------------------------------------------------------------------------
// evaluation and checkpoints

template <typename T>
Evaluation evaluate(const CapsNet<T>& net, const Dataset& ds, std::size_t batch_size, bool keep_probabilities) {
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  Evaluation ev;
  ev.num_classes = net.config().num_classes;
  ev.predictions.reserve(ds.size());
  if (keep_probabilities) ev.probabilities.reserve(ds.size() * ev.num_classes);
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  ForwardOptions<T> opts;
  opts.decode = false;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, ds.size() - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    const auto images = gather_images<T>(ds, idx);
    const auto pass = net.forward(images, opts);
    for (std::size_t n = 0; n < count; ++n) {
      ev.predictions.push_back(pass.mask[n]);
      if (pass.mask[n] == ds.labels[start + n]) ++correct;
    }
    if (keep_probabilities) {
      for (auto p : pass.probabilities.data()) ev.probabilities.push_back(static_cast<double>(p));
    }
  }
  ev.accuracy = ds.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(ds.size());
  return ev;
}

template <typename T>
void save_network(const CapsNet<T>& net, const std::filesystem::path& dir, const RunConfig& config,
                  nlohmann::json meta) {
  RunConfig stored = config;
  stored.network = net.config();
  meta["config"] = to_json(stored);
  meta["parameter_count"] = net.parameter_count();
  std::vector<NamedTensor<T>> named;
  const auto names = net.parameter_names();
  const auto values = net.parameters();
  for (std::size_t k = 0; k < names.size(); ++k) named.push_back({names[k], values[k]});
  save_checkpoint(dir, named, meta);
}

template <typename T>
LoadedNetwork<T> load_network(const std::filesystem::path& dir) {
  auto ckpt = load_checkpoint<T>(dir);
  if (!ckpt.meta.contains("config")) throw FormatError("checkpoint " + dir.string() + " has no stored config");
  RunConfig cfg = run_config_from_json(ckpt.meta.at("config"));
  LoadedNetwork<T> loaded{cfg, CapsNet<T>(cfg.network, cfg.train.seed), ckpt.meta};
  for (auto& ref : loaded.net.parameters()) {
    const auto it = ckpt.tensors.find(ref.name);
    if (it == ckpt.tensors.end()) throw FormatError("checkpoint " + dir.string() + " lacks tensor " + ref.name);
    if (it->second.shape() != ref.value->shape()) {
      throw FormatError("tensor " + ref.name + " has shape " + shape_string(it->second.shape()) + ", expected " +
                        shape_string(ref.value->shape()));
    }
    *ref.value = std::move(it->second);
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kAugmentStream = 0x415547ULL;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

void write_epoch_row(std::ofstream& out, const EpochRecord& e) {
  out << e.epoch << ',' << e.step << ',' << format_number(e.lr) << ',' << format_number(e.train_loss) << ','
      << format_number(e.margin_loss) << ',' << format_number(e.recon_loss) << ',' << format_number(e.train_acc)
      << ',' << format_number(e.test_acc) << '\n';
  out.flush();
}

void write_step_row(std::ofstream& out, const StepRecord& s) {
  out << s.step << ',' << s.epoch << ',' << format_number(s.lr) << ',' << format_number(s.loss.total) << ','
      << format_number(s.loss.margin) << ',' << format_number(s.loss.reconstruction_sse) << ','
      << format_number(s.batch_accuracy) << '\n';
}

template <typename T>
bool all_finite(const std::vector<Tensor<T>>& tensors) {
  return std::all_of(tensors.begin(), tensors.end(), [](const Tensor<T>& t) { return t.all_finite(); });
}

// Re-runs the failing batch with tracing on and writes what it can.
template <typename T>
std::filesystem::path dump_divergence(const CapsNet<T>& net, const Tensor<T>& images, std::span<const int> labels,
                                      std::span<const std::size_t> indices, const StepRecord& rec,
                                      const std::string& reason, const std::filesystem::path& out_dir) {
  const auto dir = out_dir / "divergence";
  std::filesystem::create_directories(dir);
  nlohmann::json info{{"step", rec.step},
                      {"epoch", rec.epoch},
                      {"lr", rec.lr},
                      {"reason", reason},
                      {"indices", std::vector<std::size_t>(indices.begin(), indices.end())},
                      {"labels", std::vector<int>(labels.begin(), labels.end())}};
  try {
    ForwardOptions<T> opts;
    opts.mask_labels = labels;
    opts.capture_trace = true;
    const auto pass = net.forward(images, opts);
    save_trace(dir / "trace", pass.routing.trace, {{"labels", info["labels"]}, {"indices", info["indices"]}});
    write_trace_csv(dir / "trace_sample0.csv", pass.routing.trace, 0);
    info["trace"] = "trace";
  } catch (const std::exception& e) {
    info["trace_error"] = e.what();
  }
  std::ofstream(dir / "divergence.json") << info.dump(2) << '\n';
  return dir;
}

}  // namespace

template <typename T>
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  config.validate();
  const auto& tc = config.train;
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (train_set.height() != config.network.input_hw || train_set.width() != config.network.input_hw) {
    throw DimensionError("train: dataset images do not match network.input_hw");
  }
  std::filesystem::create_directories(out_dir);

  CapsNet<T> net(config.network, tc.seed);
  AdamState<T> adam;
  const AdamParams hyper{tc.beta1, tc.beta2, tc.adam_epsilon};

  TrainResult result;
  result.metrics_csv = out_dir / "metrics.csv";
  result.steps_csv = out_dir / "steps.csv";
  result.final_checkpoint = out_dir / "checkpoints" / "final";
  std::ofstream metrics(result.metrics_csv);
  std::ofstream steps(result.steps_csv);
  if (!metrics || !steps) throw std::runtime_error("train: cannot write logs in " + out_dir.string());
  metrics << "epoch,step,lr,train_loss,margin_loss,recon_loss,train_acc,test_acc\n";
  steps << "step,epoch,lr,loss,margin_loss,recon_sse,batch_acc\n";
  result.artifacts = {result.metrics_csv, result.steps_csv};

  const std::size_t N = train_set.size();
  const std::size_t hw = train_set.height() * train_set.width();
  std::vector<std::size_t> order(N);
  std::vector<std::size_t> batch_idx;
  std::vector<int> batch_labels;
  std::vector<float> augmented;
  std::int64_t step = 0;
  bool stop = false;
  result.best_test_acc = -1.0;

  for (std::size_t epoch = 1; epoch <= tc.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::substream(tc.seed ^ kShuffleStream, epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double sum_total = 0.0, sum_margin = 0.0, sum_recon = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < N; start += tc.batch_size) {
      if (tc.max_steps != 0 && static_cast<std::size_t>(step) >= tc.max_steps) {
        stop = true;
        break;
      }
      const std::size_t count = std::min(tc.batch_size, N - start);
      batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                       order.begin() + static_cast<std::ptrdiff_t>(start + count));
      batch_labels.resize(count);
      Tensor<T> images({count, 1, train_set.height(), train_set.width()});
      augmented.resize(hw);
      for (std::size_t n = 0; n < count; ++n) {
        const std::size_t src = batch_idx[n];
        batch_labels[n] = train_set.labels[src];
        const auto pixels = train_set.image(src);
        if (tc.augmentation == Augmentation::None) {
          std::copy(pixels.begin(), pixels.end(), augmented.begin());
        } else {
          // One stream per (epoch, sample) so draws do not depend on batching.
          Rng rng = Rng::substream(tc.seed ^ kAugmentStream, (static_cast<std::uint64_t>(epoch) << 32) | src);
          augment(pixels, augmented, train_set.height(), train_set.width(), tc.augmentation, rng);
        }
        std::transform(augmented.begin(), augmented.end(), images.raw() + n * hw,
                       [](float p) { return static_cast<T>(p); });
      }

      StepRecord rec;
      rec.step = step + 1;
      rec.epoch = epoch;
      rec.lr = learning_rate(tc, step);
      std::string failure;
      ForwardOptions<T> opts;
      opts.mask_labels = batch_labels;
      std::vector<Tensor<T>> grads;
      ForwardPass<T> pass;
      try {
        pass = net.forward(images, opts);
        rec.loss = net.loss(pass, images, batch_labels, config.loss);
        if (!std::isfinite(rec.loss.total)) {
          failure = "non-finite loss";
        } else {
          grads = net.backward(pass, images, batch_labels, config.loss);
          if (!all_finite(grads)) failure = "non-finite gradient";
        }
      } catch (const NumericError& e) {
        failure = std::string("numeric failure: ") + e.what();
      }
      if (!failure.empty()) {
        steps.flush();
        const auto dir = dump_divergence(net, images, batch_labels, batch_idx, rec, failure, out_dir);
        throw TrainingDiverged("training diverged at step " + std::to_string(rec.step) + " (epoch " +
                                   std::to_string(epoch) + "): " + failure + "; diagnostics in " + dir.string(),
                               dir);
      }

      std::vector<Tensor<T>*> params;
      for (auto& ref : net.parameters()) params.push_back(ref.value);
      ++step;
      adam_step<T>(params, grads, adam, step, rec.lr, hyper);

      std::size_t batch_correct = 0;
      const auto predicted = predict_classes(pass.probabilities);
      for (std::size_t n = 0; n < count; ++n) batch_correct += predicted[n] == batch_labels[n] ? 1 : 0;
      rec.batch_accuracy = static_cast<double>(batch_correct) / static_cast<double>(count);
      correct += batch_correct;
      seen += count;
      const auto c = static_cast<double>(count);
      sum_total += rec.loss.total * c;
      sum_margin += rec.loss.margin * c;
      sum_recon += config.loss.reconstruction_weight * rec.loss.reconstruction_sse * c;
      write_step_row(steps, rec);
      result.steps.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
    }
    if (seen == 0) break;

    EpochRecord er;
    er.epoch = epoch;
    er.step = step;
    er.lr = learning_rate(tc, step);
    er.train_loss = sum_total / static_cast<double>(seen);
    er.margin_loss = sum_margin / static_cast<double>(seen);
    er.recon_loss = sum_recon / static_cast<double>(seen);
    er.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    er.test_acc = std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch == tc.epochs || stop;
    if (test_set.size() > 0 && (tc.eval_every_epoch || last)) {
      er.test_acc = evaluate(net, test_set, tc.eval_batch_size).accuracy;
      if (er.test_acc > result.best_test_acc) {
        result.best_test_acc = er.test_acc;
        result.best_epoch = epoch;
        result.best_checkpoint = out_dir / "checkpoints" / "best";
        save_network(net, result.best_checkpoint, config, {{"epoch", epoch}, {"step", step}, {"test_acc", er.test_acc}});
      }
    }
    write_epoch_row(metrics, er);
    result.epochs.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(er);
  }
  steps.flush();

  nlohmann::json final_meta{{"epoch", result.epochs.empty() ? 0 : result.epochs.back().epoch}, {"step", step}};
  if (!result.epochs.empty() && !std::isnan(result.epochs.back().test_acc)) {
    final_meta["test_acc"] = result.epochs.back().test_acc;
  }
  save_network(net, result.final_checkpoint, config, final_meta);
  result.artifacts.push_back(result.final_checkpoint);
  if (!result.best_checkpoint.empty()) result.artifacts.push_back(result.best_checkpoint);
  if (result.best_test_acc < 0.0) result.best_test_acc = 0.0;
  return result;
}

std::pair<Dataset, Dataset> load_run_data(const RunConfig& config, const std::filesystem::path& dir) {
  const std::filesystem::path root = dir.empty() ? std::filesystem::path(config.data.dir) : dir;
  if (root.empty()) throw std::runtime_error("no data directory given (set --data-dir or CAPSROUTE_DATA_DIR)");
  Dataset train_set = load_mnist(root, "train", config.data.name);
  Dataset test_set = load_mnist(root, "test", config.data.name);
  if (config.data.train_subset != 0) train_set = subset(train_set, config.data.train_subset, config.data.subset_seed);
  if (config.data.test_subset != 0) test_set = subset(test_set, config.data.test_subset, config.data.subset_seed);
  return {std::move(train_set), std::move(test_set)};
}

#define CAPSROUTE_INSTANTIATE(T)                                                                                  \
  template void adam_step(std::span<Tensor<T>* const>, std::span<const Tensor<T>>, AdamState<T>&, std::int64_t,   \
                          double, const AdamParams&);                                                             \
  template Evaluation evaluate(const CapsNet<T>&, const Dataset&, std::size_t, bool);                             \
  template void save_network(const CapsNet<T>&, const std::filesystem::path&, const RunConfig&, nlohmann::json);  \
  template LoadedNetwork<T> load_network(const std::filesystem::path&);                                           \
  template TrainResult train<T>(const RunConfig&, const Dataset&, const Dataset&, const std::filesystem::path&,      \
                             const TrainHooks&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
