#include "capsroute/analysis.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "capsroute/serialize.hpp"

namespace capsroute {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

template <typename T>
void check_trace(const RoutingTrace<T>& trace) {
  if (trace.empty()) throw std::invalid_argument("routing trace is empty");
  if (trace.logits.size() != trace.coefficients.size()) {
    throw std::invalid_argument("routing trace has mismatched logits and coefficients");
  }
  for (std::size_t t = 0; t < trace.iterations(); ++t) {
    if (trace.logits[t].rank() != 3 || trace.logits[t].shape() != trace.coefficients[t].shape() ||
        trace.logits[t].shape() != trace.logits[0].shape()) {
      throw DimensionError("routing trace entries must all be [B x I x J]");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// trace files

template <typename T>
void save_trace(const std::filesystem::path& dir, const RoutingTrace<T>& trace, const nlohmann::json& meta) {
  check_trace(trace);
  std::vector<NamedTensor<T>> named;
  for (std::size_t t = 0; t < trace.iterations(); ++t) {
    named.push_back({"logits." + std::to_string(t), &trace.logits[t]});
    named.push_back({"coefficients." + std::to_string(t), &trace.coefficients[t]});
  }
  nlohmann::json m = meta;
  m["kind"] = "routing-trace";
  m["iterations"] = trace.iterations();
  save_checkpoint(dir, named, m);
}

template <typename T>
StoredTrace<T> load_trace(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) throw TraceNotFound("no routing trace at " + dir.string());
  auto ckpt = load_checkpoint<T>(dir);
  if (ckpt.meta.value("kind", "") != "routing-trace") throw FormatError(dir.string() + " is not a routing trace");
  StoredTrace<T> out;
  const auto iterations = ckpt.meta.at("iterations").template get<std::size_t>();
  for (std::size_t t = 0; t < iterations; ++t) {
    const auto lk = ckpt.tensors.find("logits." + std::to_string(t));
    const auto ck = ckpt.tensors.find("coefficients." + std::to_string(t));
    if (lk == ckpt.tensors.end() || ck == ckpt.tensors.end()) {
      throw FormatError("routing trace " + dir.string() + " is missing iteration " + std::to_string(t));
    }
    out.trace.logits.push_back(std::move(lk->second));
    out.trace.coefficients.push_back(std::move(ck->second));
  }
  check_trace(out.trace);
  out.meta = ckpt.meta;
  if (ckpt.meta.contains("labels")) out.labels = ckpt.meta.at("labels").template get<std::vector<int>>();
  return out;
}

template <typename T>
RoutingTrace<T> capture_trace(const CapsNet<T>& net, const Dataset& ds, std::size_t count, std::size_t batch_size) {
  count = std::min(count, ds.size());
  if (count == 0 || batch_size == 0) throw std::invalid_argument("capture_trace: nothing to run");
  RoutingTrace<T> out;
  ForwardOptions<T> opts;
  opts.decode = false;
  opts.capture_trace = true;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t n = std::min(batch_size, count - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    auto pass = net.forward(gather_images<T>(ds, idx), opts);
    auto& tr = pass.routing.trace;
    if (out.empty()) {
      out = std::move(tr);
      continue;
    }
    for (std::size_t t = 0; t < out.iterations(); ++t) {
      out.logits[t] = concat0(out.logits[t], tr.logits[t]);
      out.coefficients[t] = concat0(out.coefficients[t], tr.coefficients[t]);
    }
  }
  return out;
}

template <typename T>
CoefficientSummary summarize_coefficients(const RoutingTrace<T>& trace, std::span<const int> labels,
                                          double band_lo, double band_hi, double high) {
  check_trace(trace);
  const auto& b = trace.logits.back();
  const auto& c = trace.coefficients.back();
  const std::size_t B = c.dim(0), I = c.dim(1), J = c.dim(2);
  if (labels.size() != B) throw DimensionError("summarize_coefficients: one label per sample");
  CoefficientSummary out;
  std::size_t in_band = 0, above = 0;
  double gt_sum = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    const auto g = static_cast<std::size_t>(labels[n]);
    if (g >= J) throw DimensionError("summarize_coefficients: label out of range");
    for (std::size_t i = 0; i < I; ++i) {
      const T* brow = b.raw() + (n * I + i) * J;
      const T* crow = c.raw() + (n * I + i) * J;
      const double gt = static_cast<double>(crow[g]);
      gt_sum += gt;
      in_band += (gt >= band_lo && gt <= band_hi);
      above += gt > high;
      const auto [blo, bhi] = std::minmax_element(brow, brow + J);
      if (*bhi > *blo) {
        ++out.nondegenerate_rows;
        const auto [clo, chi] = std::minmax_element(crow, crow + J);
        out.unit_range_rows += (*chi - *clo) == T(1);
      }
    }
  }
  out.rows = B * I;
  if (out.rows > 0) {
    const auto rows = static_cast<double>(out.rows);
    out.gt_mean = gt_sum / rows;
    out.gt_fraction_in_band = static_cast<double>(in_band) / rows;
    out.gt_fraction_above = static_cast<double>(above) / rows;
  }
  return out;
}

nlohmann::json to_json(const CoefficientSummary& s) {
  return {{"rows", s.rows},
          {"gt_mean", s.gt_mean},
          {"gt_fraction_in_band", s.gt_fraction_in_band},
          {"gt_fraction_above", s.gt_fraction_above},
          {"nondegenerate_rows", s.nondegenerate_rows},
          {"unit_range_rows", s.unit_range_rows}};
}

template <typename T>
void write_trace_csv(const std::filesystem::path& path, const RoutingTrace<T>& trace, std::size_t sample) {
  check_trace(trace);
  const auto& shape = trace.logits[0].shape();
  const std::size_t I = shape[1], J = shape[2];
  if (sample >= shape[0]) throw std::out_of_range("write_trace_csv: sample outside batch");
  auto out = open_csv(path);
  out << "iteration,lower_index,parent_index,logit,coefficient\n";
  for (std::size_t t = 0; t < trace.iterations(); ++t) {
    const T* b = trace.logits[t].raw() + sample * I * J;
    const T* c = trace.coefficients[t].raw() + sample * I * J;
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        out << t + 1 << ',' << i << ',' << j << ',' << num(b[i * J + j]) << ',' << num(c[i * J + j]) << '\n';
      }
    }
  }
}

RoutingTrace<double> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TraceNotFound("no trace CSV at " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("iteration,lower_index,parent_index", 0) != 0) {
    throw FormatError(path.string() + ": not a trace CSV");
  }
  struct Entry {
    std::size_t t, i, j;
    double b, c;
  };
  std::vector<Entry> entries;
  std::size_t T = 0, I = 0, J = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Entry e{};
    char comma = 0;
    std::istringstream row(line);
    row >> e.t >> comma >> e.i >> comma >> e.j >> comma >> e.b >> comma >> e.c;
    if (!row || e.t == 0) throw FormatError(path.string() + ": malformed row '" + line + "'");
    T = std::max(T, e.t);
    I = std::max(I, e.i + 1);
    J = std::max(J, e.j + 1);
    entries.push_back(e);
  }
  if (entries.empty()) throw FormatError(path.string() + ": no rows");
  if (entries.size() != T * I * J) throw FormatError(path.string() + ": incomplete trace");
  RoutingTrace<double> trace;
  for (std::size_t t = 0; t < T; ++t) {
    trace.logits.emplace_back(Shape{1, I, J});
    trace.coefficients.emplace_back(Shape{1, I, J});
  }
  for (const auto& e : entries) {
    trace.logits[e.t - 1][e.i * J + e.j] = e.b;
    trace.coefficients[e.t - 1][e.i * J + e.j] = e.c;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// histograms

std::size_t Histogram::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

double HistogramTable::bin_left(std::size_t bin) const {
  return lo + (hi - lo) * static_cast<double>(bin) / static_cast<double>(bins);
}

double HistogramTable::bin_right(std::size_t bin) const { return bin + 1 == bins ? hi : bin_left(bin + 1); }

std::size_t HistogramTable::bin_of(double value) const {
  if (!(value > lo)) return 0;
  if (value >= hi) return bins - 1;
  const auto b = static_cast<std::size_t>((value - lo) / (hi - lo) * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

template <typename T>
HistogramTable coefficient_histograms(const RoutingTrace<T>& trace, std::span<const int> labels, HistogramMode mode,
                                      std::size_t bins, TraceQuantity quantity) {
  check_trace(trace);
  if (bins == 0) throw std::invalid_argument("coefficient_histograms: bins must be positive");
  const auto& shape = trace.logits[0].shape();
  const std::size_t B = shape[0], I = shape[1], J = shape[2];
  if (mode == HistogramMode::GroundTruth) {
    if (labels.size() != B) throw DimensionError("coefficient_histograms: one label per batch element required");
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= J) throw std::out_of_range("coefficient_histograms: bad label");
    }
  }
  const auto& source = quantity == TraceQuantity::Coefficients ? trace.coefficients : trace.logits;

  auto visit = [&](std::size_t t, auto&& fn) {
    const T* x = source[t].raw();
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t i = 0; i < I; ++i) {
        const T* row = x + (n * I + i) * J;
        if (mode == HistogramMode::GroundTruth) {
          fn(static_cast<double>(row[labels[n]]));
        } else {
          for (std::size_t j = 0; j < J; ++j) fn(static_cast<double>(row[j]));
        }
      }
    }
  };

  HistogramTable table;
  table.bins = bins;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  visit(0, [&](double v) {
    if (std::isfinite(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  });
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 0.0;
  }
  if (hi - lo <= 0.0) {
    lo -= 0.5;
    hi += 0.5;
  }
  table.lo = lo;
  table.hi = hi;
  for (std::size_t t = 0; t < trace.iterations(); ++t) {
    Histogram h;
    h.counts.assign(bins, 0);
    visit(t, [&](double v) { ++h.counts[table.bin_of(v)]; });
    table.iterations.push_back(std::move(h));
  }
  return table;
}

void write_histogram_csv(const std::filesystem::path& path, const HistogramTable& table) {
  auto out = open_csv(path);
  out << "iteration,bin_left,bin_right,count\n";
  for (std::size_t t = 0; t < table.iterations.size(); ++t) {
    for (std::size_t b = 0; b < table.bins; ++b) {
      out << t + 1 << ',' << num(table.bin_left(b)) << ',' << num(table.bin_right(b)) << ','
          << table.iterations[t].counts[b] << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// rows

template <typename T>
std::vector<RowValue> capsule_row_extract(const RoutingTrace<T>& trace, std::span<const std::size_t> lower_indices,
                                          std::size_t sample) {
  check_trace(trace);
  const auto& shape = trace.logits[0].shape();
  const std::size_t I = shape[1], J = shape[2];
  if (sample >= shape[0]) throw std::out_of_range("capsule_row_extract: sample outside batch");
  const std::size_t last = trace.iterations() - 1;
  std::vector<RowValue> rows;
  rows.reserve(lower_indices.size() * J);
  for (auto i : lower_indices) {
    if (i >= I) throw std::out_of_range("capsule_row_extract: lower index " + std::to_string(i) + " >= " +
                                        std::to_string(I));
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t at = (sample * I + i) * J + j;
      rows.push_back({sample, i, j, static_cast<double>(trace.logits[last][at]),
                      static_cast<double>(trace.coefficients[last][at])});
    }
  }
  return rows;
}

void write_rows_csv(const std::filesystem::path& path, std::span<const RowValue> rows) {
  auto out = open_csv(path);
  out << "sample,lower_index,parent_index,logit,coefficient\n";
  for (const auto& r : rows) {
    out << r.sample << ',' << r.lower << ',' << r.parent << ',' << num(r.logit) << ',' << num(r.coefficient) << '\n';
  }
}

// ---------------------------------------------------------------------------
// tuning curves

TuningCurve tuning_curves(std::span<const double> probabilities, std::span<const int> labels, std::size_t classes) {
  if (classes == 0 || probabilities.size() != labels.size() * classes) {
    throw DimensionError("tuning_curves: probabilities must be [N x classes]");
  }
  TuningCurve curve;
  curve.classes = classes;
  curve.matrix.assign(classes * classes, 0.0);
  curve.class_counts.assign(classes, 0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int g = labels[n];
    if (g < 0 || static_cast<std::size_t>(g) >= classes) throw std::out_of_range("tuning_curves: bad label");
    ++curve.class_counts[static_cast<std::size_t>(g)];
    for (std::size_t j = 0; j < classes; ++j) {
      curve.matrix[static_cast<std::size_t>(g) * classes + j] += probabilities[n * classes + j];
    }
  }
  for (std::size_t g = 0; g < classes; ++g) {
    if (curve.class_counts[g] == 0) continue;
    for (std::size_t j = 0; j < classes; ++j) {
      curve.matrix[g * classes + j] /= static_cast<double>(curve.class_counts[g]);
    }
  }
  return curve;
}

template <typename T>
TuningCurve tuning_curves(const CapsNet<T>& net, const Dataset& ds, std::size_t batch_size) {
  const auto ev = evaluate(net, ds, batch_size, true);
  return tuning_curves(ev.probabilities, ds.labels, ev.num_classes);
}

void write_tuning_csv(const std::filesystem::path& path, const TuningCurve& curve) {
  auto out = open_csv(path);
  out << "truth,count";
  for (std::size_t j = 0; j < curve.classes; ++j) out << ",capsule" << j;
  out << '\n';
  for (std::size_t g = 0; g < curve.classes; ++g) {
    out << g << ',' << curve.class_counts[g];
    for (std::size_t j = 0; j < curve.classes; ++j) out << ',' << num(curve.at(g, j));
    out << '\n';
  }
}

void write_probabilities_csv(const std::filesystem::path& path, const Evaluation& eval, std::span<const int> labels) {
  const std::size_t J = eval.num_classes;
  if (eval.probabilities.size() != labels.size() * J || eval.predictions.size() != labels.size()) {
    throw DimensionError("write_probabilities_csv: evaluation does not match labels");
  }
  auto out = open_csv(path);
  out << "index,label,prediction";
  for (std::size_t j = 0; j < J; ++j) out << ",p" << j;
  out << '\n';
  for (std::size_t n = 0; n < labels.size(); ++n) {
    out << n << ',' << labels[n] << ',' << eval.predictions[n];
    for (std::size_t j = 0; j < J; ++j) out << ',' << num(eval.probabilities[n * J + j]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// sweeps

template <typename T>
std::vector<SweepRow> iteration_sweep(const RunConfig& base, std::span<const int> r_values, const Dataset& train_set,
                                      const Dataset& test_set, const std::filesystem::path& out_dir) {
  std::vector<SweepRow> rows;
  for (int r : r_values) {
    RunConfig cfg = base;
    cfg.network.routing.iterations = r;
    const auto dir = out_dir / cfg.run_id();
    const auto result = train<T>(cfg, train_set, test_set, dir);
    SweepRow row;
    row.iterations = r;
    row.run_dir = dir;
    row.best_test_acc = result.best_test_acc;
    if (!result.epochs.empty()) {
      row.final_test_acc = result.epochs.back().test_acc;
      row.final_train_acc = result.epochs.back().train_acc;
      row.gap = row.final_train_acc - row.final_test_acc;
    }
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  auto out = open_csv(path);
  out << "iterations,final_test_acc,best_test_acc,final_train_acc,gap,run_dir\n";
  for (const auto& r : rows) {
    out << r.iterations << ',' << num(r.final_test_acc) << ',' << num(r.best_test_acc) << ','
        << num(r.final_train_acc) << ',' << num(r.gap) << ',' << r.run_dir.filename().string() << '\n';
  }
}

// ---------------------------------------------------------------------------
// ensembles

int vote_label(std::span<const int> votes, std::span<const double> summed_probabilities) {
  if (votes.size() != 3) throw std::invalid_argument("vote_label: exactly three votes required");
  std::map<int, int> tally;
  for (int v : votes) ++tally[v];
  for (const auto& [label, n] : tally) {
    if (n >= 2) return label;
  }
  int best = votes[0];
  double best_p = -std::numeric_limits<double>::infinity();
  for (const auto& [label, n] : tally) {
    if (label < 0 || static_cast<std::size_t>(label) >= summed_probabilities.size()) {
      throw std::out_of_range("vote_label: vote outside probability vector");
    }
    if (summed_probabilities[static_cast<std::size_t>(label)] > best_p) {
      best_p = summed_probabilities[static_cast<std::size_t>(label)];
      best = label;
    }
  }
  return best;
}

VoteResult majority_vote(std::span<const Evaluation> models, std::span<const int> labels) {
  if (models.size() != 3) {
    throw std::invalid_argument("majority_vote: exactly 3 models required, got " + std::to_string(models.size()));
  }
  const std::size_t N = labels.size();
  const std::size_t J = models[0].num_classes;
  for (const auto& m : models) {
    if (m.num_classes != J || m.predictions.size() != N || m.probabilities.size() != N * J) {
      throw DimensionError("majority_vote: model evaluations must cover the same samples with probabilities");
    }
  }
  VoteResult result;
  result.predictions.reserve(N);
  std::vector<double> summed(J);
  for (std::size_t n = 0; n < N; ++n) {
    EnsemblePrediction p;
    std::fill(summed.begin(), summed.end(), 0.0);
    for (const auto& m : models) {
      p.votes.push_back(m.predictions[n]);
      const auto row = std::span<const double>(m.probabilities).subspan(n * J, J);
      p.probs.emplace_back(row.begin(), row.end());
      for (std::size_t j = 0; j < J; ++j) summed[j] += row[j];
    }
    p.label = vote_label(p.votes, summed);
    p.agreement = static_cast<int>(std::count(p.votes.begin(), p.votes.end(), p.label));
    if (p.label != labels[n]) ++result.errors;
    result.predictions.push_back(std::move(p));
  }
  result.error_rate = N == 0 ? 0.0 : static_cast<double>(result.errors) / static_cast<double>(N);
  return result;
}

// ---------------------------------------------------------------------------
// galleries

std::vector<GalleryEntry> misclassifications(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("misclassifications: size mismatch");
  std::vector<GalleryEntry> out;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (predictions[n] != labels[n]) out.push_back({n, predictions[n], labels[n]});
  }
  return out;
}

std::vector<std::filesystem::path> write_gallery(const std::filesystem::path& stem,
                                                 std::span<const GalleryEntry> entries, const Dataset& ds,
                                                 std::size_t columns) {
  if (columns == 0) throw std::invalid_argument("write_gallery: columns must be positive");
  std::vector<GalleryEntry> sorted(entries.begin(), entries.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.index < b.index; });

  std::filesystem::path csv = stem;
  csv += ".csv";
  std::vector<std::filesystem::path> written{csv};
  {
    auto out = open_csv(csv);
    out << "index,prediction,ground_truth\n";
    for (const auto& e : sorted) out << e.index << ',' << e.predicted << ',' << e.truth << '\n';
  }
  if (sorted.empty()) return written;

  const std::size_t h = ds.height(), w = ds.width(), pad = 2;
  const std::size_t cols = std::min(columns, sorted.size());
  const std::size_t rows = (sorted.size() + cols - 1) / cols;
  const std::size_t W = cols * (w + pad) + pad;
  const std::size_t H = rows * (h + pad) + pad;
  std::vector<std::uint8_t> canvas(W * H, 128);
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (sorted[k].index >= ds.size()) throw std::out_of_range("write_gallery: index outside dataset");
    const auto img = ds.image(sorted[k].index);
    const std::size_t oy = pad + (k / cols) * (h + pad);
    const std::size_t ox = pad + (k % cols) * (w + pad);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp(static_cast<double>(img[y * w + x]), 0.0, 1.0);
        canvas[(oy + y) * W + ox + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  std::filesystem::path png = stem;
  png += ".png";
  write_png_gray(png, W, H, canvas);
  written.push_back(png);
  return written;
}

// ---------------------------------------------------------------------------
// PNG

void write_png_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                    std::span<const std::uint8_t> pixels) {
  if (width == 0 || height == 0 || pixels.size() != width * height) {
    throw DimensionError("write_png_gray: pixel count does not match dimensions");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), static_cast<png_int_32>(width), nullptr)) {
    throw std::runtime_error("cannot write " + path.string() + ": " + image.message);
  }
}

#define CAPSROUTE_INSTANTIATE(T)                                                                                \
  template void save_trace(const std::filesystem::path&, const RoutingTrace<T>&, const nlohmann::json&);        \
  template StoredTrace<T> load_trace(const std::filesystem::path&);                                             \
  template void write_trace_csv(const std::filesystem::path&, const RoutingTrace<T>&, std::size_t);             \
  template RoutingTrace<T> capture_trace(const CapsNet<T>&, const Dataset&, std::size_t, std::size_t);          \
  template CoefficientSummary summarize_coefficients(const RoutingTrace<T>&, std::span<const int>, double,      \
                                                     double, double);                                           \
  template HistogramTable coefficient_histograms(const RoutingTrace<T>&, std::span<const int>, HistogramMode,   \
                                                 std::size_t, TraceQuantity);                                   \
  template std::vector<RowValue> capsule_row_extract(const RoutingTrace<T>&, std::span<const std::size_t>,      \
                                                     std::size_t);                                              \
  template TuningCurve tuning_curves(const CapsNet<T>&, const Dataset&, std::size_t);                           \
  template std::vector<SweepRow> iteration_sweep<T>(const RunConfig&, std::span<const int>, const Dataset&,        \
                                                 const Dataset&, const std::filesystem::path&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
