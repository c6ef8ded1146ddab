#include "capsroute/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include "capsroute/layers.hpp"
#include "capsroute/network.hpp"
#include "capsroute/normalizers.hpp"
#include "capsroute/rng.hpp"
#include "capsroute/routing.hpp"

namespace capsroute {

namespace {

using Td = Tensor<double>;

constexpr double kLayerTolerance = 1e-5;
constexpr double kNetworkTolerance = 1e-4;
constexpr double kOracleTolerance = 1e-6;
constexpr double kEps = 1e-5;

Td random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Td t(std::move(shape));
  for (auto& x : t.data()) x = sd * rng.normal();
  return t;
}

Td uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Td t(std::move(shape));
  for (auto& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

double dot(const Td& a, const Td& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

// Compares grad against central differences of f over the listed entries of
// t (all entries when `indices` is empty).
struct GradientProbe {
  bool flip = false;
  double worst = 0.0;
  std::size_t count = 0;

  void run(Td& t, const Td& grad, const std::function<double()>& f, std::vector<std::size_t> indices = {}) {
    if (grad.size() != t.size()) throw DimensionError("gradient probe: size mismatch");
    if (indices.empty()) {
      indices.resize(t.size());
      std::iota(indices.begin(), indices.end(), std::size_t{0});
    }
    std::vector<double> analytic(grad.data().begin(), grad.data().end());
    if (flip) {
      for (auto& a : analytic) a = -a;
    }
    worst = std::max(worst, finite_difference_check(t.data(), analytic, indices, f, kEps));
    count += indices.size();
  }
};

CheckResult gradient_result(std::string name, const GradientProbe& probe, double tol) {
  CheckResult r;
  r.name = std::move(name);
  r.kind = "gradient";
  r.max_error = probe.worst;
  r.tolerance = tol;
  r.samples = probe.count;
  r.passed = probe.worst < tol;
  return r;
}

CheckResult check_conv(const VerifyOptions& o, bool flip) {
  struct Case {
    std::size_t B, C, H, O, k, s;
    Activation act;
  };
  const Case cases[] = {{1, 1, 6, 1, 3, 1, Activation::None},
                        {2, 2, 7, 3, 3, 2, Activation::Relu},
                        {1, 2, 9, 2, 5, 1, Activation::Relu}};
  Rng rng(o.seed);
  GradientProbe probe{flip};
  for (const auto& cs : cases) {
    auto layer = make_conv_layer<double>(cs.O, cs.C, cs.k, cs.s, cs.act, 0.5, rng);
    layer.bias = random_tensor({cs.O}, rng, 0.1);
    Td x = random_tensor({cs.B, cs.C, cs.H, cs.H}, rng);
    const Td out = conv2d_forward(x, layer);
    const Td weight = random_tensor(out.shape(), rng);
    const auto f = [&] { return dot(conv2d_forward(x, layer), weight); };
    const auto g = conv2d_backward(weight, x, out, layer);
    probe.run(x, g.input, f);
    probe.run(layer.kernels, g.kernels, f);
    probe.run(layer.bias, g.bias, f);
  }
  return gradient_result("conv2d", probe, kLayerTolerance);
}

CheckResult check_dense(const VerifyOptions& o, bool flip) {
  Rng rng(o.seed + 1);
  GradientProbe probe{flip};
  for (auto act : {Activation::None, Activation::Relu, Activation::Sigmoid}) {
    auto layer = make_dense_layer<double>(4, 5, act, 0.5, rng);
    layer.bias = random_tensor({4}, rng, 0.1);
    Td x = random_tensor({3, 5}, rng);
    const Td out = dense_forward(x, layer);
    const Td weight = random_tensor(out.shape(), rng);
    const auto f = [&] { return dot(dense_forward(x, layer), weight); };
    const auto g = dense_backward(weight, x, out, layer);
    probe.run(x, g.input, f);
    probe.run(layer.weights, g.weights, f);
    probe.run(layer.bias, g.bias, f);
  }
  return gradient_result("dense", probe, kLayerTolerance);
}

CheckResult check_squash(const VerifyOptions& o, bool flip) {
  Rng rng(o.seed + 2);
  const double scales[] = {0.01, 0.3, 1.0, 3.0, 10.0, 50.0};
  Td s({std::size(scales), 4});
  for (std::size_t r = 0; r < std::size(scales); ++r) {
    for (std::size_t d = 0; d < 4; ++d) s[r * 4 + d] = scales[r] * rng.normal();
  }
  const Td weight = random_tensor(s.shape(), rng);
  GradientProbe probe{flip};
  probe.run(s, squash_backward(s, weight), [&] { return dot(squash(s), weight); });
  return gradient_result("squash", probe, kLayerTolerance);
}

CheckResult check_routing_frozen(const VerifyOptions& o, bool flip) {
  Rng rng(o.seed + 3);
  GradientProbe probe{flip};
  for (int variant = 0; variant < 3; ++variant) {
    Td u = random_tensor({2, 3, 2, 4}, rng, 0.5);
    Td c;
    if (variant == 0) {
      c = uniform_tensor({2, 3, 2}, rng, 0.0, 1.0);
    } else if (variant == 1) {
      c = route_softmax(u, 3).state.c;
    } else {
      c = route_maxmin(u, 3, Normalization{NormKind::MaxMin}).state.c;
    }
    const auto state = route_with_coefficients(u, c);
    const Td weight = random_tensor(state.v.shape(), rng);
    probe.run(u, routing_backward(weight, state), [&] { return dot(route_with_coefficients(u, c).v, weight); });
  }
  return gradient_result("routing.frozen_c", probe, kLayerTolerance);
}

CheckResult check_margin(const VerifyOptions& o, bool flip) {
  Rng rng(o.seed + 4);
  GradientProbe probe{flip};
  for (const MarginLossParams params : {MarginLossParams{}, MarginLossParams{0.8, 0.2, 0.5}}) {
    Td probs = uniform_tensor({4, 5}, rng, 0.01, 0.99);
    std::vector<int> labels(4);
    for (auto& l : labels) l = static_cast<int>(rng.below(5));
    probe.run(probs, margin_loss_grad(probs, labels, params), [&] { return margin_loss(probs, labels, params); });
  }
  return gradient_result("margin_loss", probe, kLayerTolerance);
}

CheckResult check_reconstruction(const VerifyOptions& o, bool flip) {
  Rng rng(o.seed + 5);
  const std::size_t B = 3, J = 4, D = 5, P = 10;
  Decoder<double> dec{make_dense_layer<double>(8, J * D, Activation::Relu, 0.5, rng),
                      make_dense_layer<double>(12, 8, Activation::Relu, 0.5, rng),
                      make_dense_layer<double>(P, 12, Activation::Sigmoid, 0.5, rng)};
  for (auto* layer : {&dec.fc1, &dec.fc2, &dec.fc3}) layer->bias = random_tensor(layer->bias.shape(), rng, 0.1);
  Td caps = random_tensor({B, J, D}, rng, 0.3);
  const Td target = uniform_tensor({B, P}, rng, 0.0, 1.0);
  const std::vector<int> keep = {1, 3, 0};
  const double weight = 0.0005;

  const auto f = [&] {
    return weight * reconstruction_sse(masked_reconstruction(caps, keep, dec).output, target);
  };
  const auto pass = masked_reconstruction(caps, keep, dec);
  Td grad_out(pass.output.shape());
  for (std::size_t k = 0; k < grad_out.size(); ++k) {
    grad_out[k] = 2.0 * weight * (pass.output[k] - target[k]) / static_cast<double>(B);
  }
  const auto g = masked_reconstruction_backward(grad_out, pass, dec, J, D);

  GradientProbe probe{flip};
  probe.run(caps, g.digitcaps, f);
  probe.run(dec.fc1.weights, g.fc1.weights, f);
  probe.run(dec.fc1.bias, g.fc1.bias, f);
  probe.run(dec.fc2.weights, g.fc2.weights, f);
  probe.run(dec.fc2.bias, g.fc2.bias, f);
  probe.run(dec.fc3.weights, g.fc3.weights, f);
  probe.run(dec.fc3.bias, g.fc3.bias, f);
  auto r = gradient_result("reconstruction", probe, kLayerTolerance);

  std::size_t leaked = 0;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t j = 0; j < J; ++j) {
      if (static_cast<int>(j) == keep[n]) continue;
      for (std::size_t d = 0; d < D; ++d) leaked += g.digitcaps[(n * J + j) * D + d] != 0.0;
    }
  }
  if (leaked > 0) {
    r.passed = false;
    r.detail = std::to_string(leaked) + " masked-row gradients are nonzero";
  }
  return r;
}

CheckResult check_network(const VerifyOptions& o, bool flip) {
  NetworkConfig cfg;
  cfg.conv1_filters = 16;
  cfg.primarycaps_filters = 16;
  cfg.num_classes = 2;
  cfg.routing.norm = Normalization{NormKind::MaxMin};
  cfg.routing.iterations = 3;
  CapsNet<double> net(cfg, o.seed);
  Rng rng(o.seed + 6);
  const std::size_t B = 2;
  const Td images = uniform_tensor({B, 1, cfg.input_hw, cfg.input_hw}, rng, 0.0, 1.0);
  const std::vector<int> labels = {0, 1};
  const LossConfig loss_cfg;

  const Td coefficients = net.forward(images, {.decode = false}).routing.state.c;
  ForwardOptions<double> opts;
  opts.mask_labels = labels;
  opts.fixed_coefficients = &coefficients;
  const auto pass = net.forward(images, opts);
  const auto grads = net.backward(pass, images, labels, loss_cfg);
  const auto f = [&] { return net.loss(net.forward(images, opts), images, labels, loss_cfg).total; };

  // 50 entries spread round-robin over the parameter tensors.
  auto params = net.parameters();
  std::vector<std::vector<std::size_t>> picks(params.size());
  for (std::size_t k = 0; k < 50; ++k) {
    const std::size_t p = k % params.size();
    picks[p].push_back(static_cast<std::size_t>(rng.below(params[p].value->size())));
  }
  GradientProbe probe{flip};
  for (std::size_t p = 0; p < params.size(); ++p) probe.run(*params[p].value, grads[p], f, picks[p]);
  return gradient_result("network.end_to_end", probe, kNetworkTolerance);
}

double oracle_error(std::span<const double> got, std::span<const double> want) {
  double worst = 0.0;
  for (std::size_t k = 0; k < got.size(); ++k) {
    worst = std::max(worst, std::abs(got[k] - want[k]) / std::max(1.0, std::abs(want[k])));
  }
  return worst;
}

CheckResult check_routing_oracle(const VerifyOptions& o, bool softmax_order) {
  Rng rng(o.seed + (softmax_order ? 7 : 8));
  double worst = 0.0;
  for (std::size_t n = 0; n < o.routing_instances; ++n) {
    const std::size_t I = 1 + rng.below(3), J = 1 + rng.below(3), D = 1 + rng.below(4);
    const int r = 1 + static_cast<int>(rng.below(4));
    const Td u = random_tensor({1, I, J, D}, rng);
    const auto got = softmax_order ? route_softmax(u, r, true)
                                   : route_maxmin(u, r, Normalization{NormKind::MaxMin}, 1.0, true);
    const auto want = softmax_order ? scalar_route_softmax(u.data(), I, J, D, r)
                                    : scalar_route_maxmin(u.data(), I, J, D, r);
    worst = std::max(worst, oracle_error(got.state.v.data(), want.v));
    worst = std::max(worst, oracle_error(got.trace.coefficients.back().data(), want.c));
    worst = std::max(worst, oracle_error(got.trace.logits.back().data(), want.b));
  }
  CheckResult res;
  res.name = softmax_order ? "routing.oracle.softmax" : "routing.oracle.maxmin";
  res.kind = "oracle";
  res.max_error = worst;
  res.tolerance = kOracleTolerance;
  res.samples = o.routing_instances;
  res.passed = worst <= kOracleTolerance;
  return res;
}

std::vector<double> random_row(Rng& rng, std::size_t J) {
  const double scale = std::pow(10.0, rng.uniform(-1.0, 2.0));
  std::vector<double> b(J);
  for (auto& x : b) x = scale * rng.normal();
  return b;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

CheckResult property_result(std::string name, double worst, double tol, std::size_t rows, std::size_t violations,
                            std::string what) {
  CheckResult r;
  r.name = std::move(name);
  r.kind = "property";
  r.max_error = worst;
  r.tolerance = tol;
  r.samples = rows;
  r.passed = violations == 0 && worst <= tol;
  if (violations > 0) r.detail = std::to_string(violations) + " rows violate " + what;
  return r;
}

CheckResult check_softmax_rows(const VerifyOptions& o) {
  Rng rng(o.seed + 9);
  const std::size_t J = 10;
  std::vector<double> c(J), c2(J), shifted(J);
  double worst = 0.0;
  std::size_t bad = 0;
  for (std::size_t n = 0; n < o.normalizer_rows; ++n) {
    const auto b = random_row(rng, J);
    softmax<double>(b, c);
    worst = std::max(worst, std::abs(std::accumulate(c.begin(), c.end(), 0.0) - 1.0));
    const double k = rng.uniform(-10.0, 10.0);
    for (std::size_t j = 0; j < J; ++j) shifted[j] = b[j] + k;
    softmax<double>(shifted, c2);
    for (std::size_t j = 0; j < J; ++j) worst = std::max(worst, std::abs(c[j] - c2[j]));
    bad += argmax(c) != argmax(b);
  }
  return property_result("normalizers.softmax", worst, 1e-6, o.normalizer_rows, bad, "argmax preservation");
}

CheckResult check_maxmin_rows(const VerifyOptions& o) {
  Rng rng(o.seed + 10);
  const std::size_t J = 10;
  std::vector<double> c(J), c2(J), mapped(J);
  double worst = 0.0;
  std::size_t bad = 0;
  for (std::size_t n = 0; n < o.normalizer_rows; ++n) {
    const auto b = random_row(rng, J);
    const double p = (n % 2 == 0) ? 0.0 : rng.uniform(-1.0, 0.0);
    const double q = (n % 2 == 0) ? 1.0 : rng.uniform(0.01, 1.0);
    max_min<double>(b, c, p, q);
    const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
    bad += (*lo != p || *hi != q || argmax(c) != argmax(b));
    // power-of-two scale: bitwise equal
    const double alpha = (n % 3 == 0) ? 2.0 : (n % 3 == 1 ? 0.5 : 4.0);
    for (std::size_t j = 0; j < J; ++j) mapped[j] = alpha * b[j];
    max_min<double>(mapped, c2, p, q);
    bad += !std::equal(c.begin(), c.end(), c2.begin());
    // general positive affine map
    const double a = rng.uniform(0.1, 10.0), shift = rng.uniform(-10.0, 10.0);
    for (std::size_t j = 0; j < J; ++j) mapped[j] = a * b[j] + shift;
    max_min<double>(mapped, c2, p, q);
    for (std::size_t j = 0; j < J; ++j) worst = std::max(worst, std::abs(c[j] - c2[j]));
  }
  return property_result("normalizers.maxmin", worst, 1e-9, o.normalizer_rows, bad,
                         "exact p/q attainment or scale invariance");
}

CheckResult check_wta_rows(const VerifyOptions& o) {
  Rng rng(o.seed + 11);
  const std::size_t J = 10;
  std::vector<double> c(J);
  std::size_t bad = 0;
  for (std::size_t n = 0; n < o.normalizer_rows; ++n) {
    const auto b = random_row(rng, J);
    wta<double>(b, c);
    const auto ones = std::count(c.begin(), c.end(), 1.0);
    const auto zeros = std::count(c.begin(), c.end(), 0.0);
    bad += (ones != 1 || zeros != static_cast<long>(J) - 1 || argmax(c) != argmax(b));
  }
  return property_result("normalizers.wta", 0.0, 0.0, o.normalizer_rows, bad, "one-hot at argmax");
}

using Runner = std::function<CheckResult(const VerifyOptions&, bool)>;

const std::vector<std::pair<std::string, Runner>>& registry() {
  static const std::vector<std::pair<std::string, Runner>> checks = {
      {"conv2d", check_conv},
      {"dense", check_dense},
      {"squash", check_squash},
      {"routing.frozen_c", check_routing_frozen},
      {"margin_loss", check_margin},
      {"reconstruction", check_reconstruction},
      {"network.end_to_end", check_network},
      {"routing.oracle.softmax", [](const VerifyOptions& o, bool) { return check_routing_oracle(o, true); }},
      {"routing.oracle.maxmin", [](const VerifyOptions& o, bool) { return check_routing_oracle(o, false); }},
      {"normalizers.softmax", [](const VerifyOptions& o, bool) { return check_softmax_rows(o); }},
      {"normalizers.maxmin", [](const VerifyOptions& o, bool) { return check_maxmin_rows(o); }},
      {"normalizers.wta", [](const VerifyOptions& o, bool) { return check_wta_rows(o); }},
  };
  return checks;
}

void scalar_squash(const double* s, double* v, std::size_t D) {
  double n2 = 0.0;
  for (std::size_t d = 0; d < D; ++d) n2 += s[d] * s[d];
  const double f = n2 / (1.0 + n2) / std::sqrt(n2 + 1e-9);
  for (std::size_t d = 0; d < D; ++d) v[d] = f * s[d];
}

// s_j = sum_i c_ij u_{j|i}; v_j = squash(s_j); b_ij += u_{j|i} . v_j
void scalar_sum_and_update(std::span<const double> u, ScalarRouting& st, std::size_t I, std::size_t J,
                           std::size_t D) {
  std::vector<double> s(J * D, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t d = 0; d < D; ++d) s[j * D + d] += st.c[i * J + j] * u[(i * J + j) * D + d];
    }
    scalar_squash(&s[j * D], &st.v[j * D], D);
  }
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t j = 0; j < J; ++j) {
      double agree = 0.0;
      for (std::size_t d = 0; d < D; ++d) agree += u[(i * J + j) * D + d] * st.v[j * D + d];
      st.b[i * J + j] += agree;
    }
  }
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double finite_difference_check(std::span<double> values, std::span<const double> analytic,
                               std::span<const std::size_t> indices, const std::function<double()>& loss,
                               double eps) {
  double worst = 0.0;
  for (const std::size_t k : indices) {
    const double saved = values[k];
    values[k] = saved + eps;
    const double up = loss();
    values[k] = saved - eps;
    const double down = loss();
    values[k] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, relative_error(analytic[k], numeric));
  }
  return worst;
}

ScalarRouting scalar_route_softmax(std::span<const double> u_hat, std::size_t I, std::size_t J, std::size_t D,
                                   int iterations) {
  ScalarRouting st{std::vector<double>(J * D), std::vector<double>(I * J, 0.0), std::vector<double>(I * J)};
  for (int t = 0; t < iterations; ++t) {
    for (std::size_t i = 0; i < I; ++i) {
      double top = st.b[i * J];
      for (std::size_t j = 1; j < J; ++j) top = std::max(top, st.b[i * J + j]);
      double z = 0.0;
      for (std::size_t j = 0; j < J; ++j) z += std::exp(st.b[i * J + j] - top);
      for (std::size_t j = 0; j < J; ++j) st.c[i * J + j] = std::exp(st.b[i * J + j] - top) / z;
    }
    if (t + 1 == iterations) {
      // the trace holds the logits that fed the last normalization
      const auto logits = st.b;
      scalar_sum_and_update(u_hat, st, I, J, D);
      st.b = logits;
    } else {
      scalar_sum_and_update(u_hat, st, I, J, D);
    }
  }
  return st;
}

ScalarRouting scalar_route_maxmin(std::span<const double> u_hat, std::size_t I, std::size_t J, std::size_t D,
                                  int iterations, double p, double q) {
  ScalarRouting st{std::vector<double>(J * D), std::vector<double>(I * J, 0.0), std::vector<double>(I * J, 1.0)};
  for (int t = 0; t < iterations; ++t) {
    scalar_sum_and_update(u_hat, st, I, J, D);
    for (std::size_t i = 0; i < I; ++i) {
      double lo = st.b[i * J], hi = st.b[i * J];
      for (std::size_t j = 1; j < J; ++j) {
        lo = std::min(lo, st.b[i * J + j]);
        hi = std::max(hi, st.b[i * J + j]);
      }
      for (std::size_t j = 0; j < J; ++j) {
        st.c[i * J + j] = hi > lo ? p + (st.b[i * J + j] - lo) / (hi - lo) * (q - p) : q;
      }
    }
  }
  return st;
}

std::vector<std::string> verify_check_names() {
  std::vector<std::string> names;
  for (const auto& [name, run] : registry()) names.push_back(name);
  return names;
}

std::vector<CheckResult> run_verification(const VerifyOptions& options) {
  const auto names = verify_check_names();
  for (const auto& want : options.only) {
    if (std::find(names.begin(), names.end(), want) == names.end()) {
      throw std::invalid_argument("unknown check '" + want + "'");
    }
  }
  if (!options.sign_flip.empty() && std::find(names.begin(), names.end(), options.sign_flip) == names.end()) {
    throw std::invalid_argument("unknown check '" + options.sign_flip + "'");
  }
  std::vector<CheckResult> results;
  for (const auto& [name, run] : registry()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = run(options, options.sign_flip == name);
    } catch (const std::exception& e) {
      r.name = name;
      r.kind = "error";
      r.passed = false;
      r.detail = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (options.sign_flip == name && r.detail.empty()) r.detail = "sign flip injected";
    results.push_back(std::move(r));
  }
  return results;
}

std::string format_report(std::span<const CheckResult> results) {
  std::string out;
  char line[256];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%s %-24s %-8s max_err=%.3e tol=%.1e n=%zu %.2fs", r.passed ? "PASS" : "FAIL",
                  r.name.c_str(), r.kind.c_str(), r.max_error, r.tolerance, r.samples, r.seconds);
    out += line;
    if (!r.detail.empty()) out += "  (" + r.detail + ")";
    out += '\n';
  }
  return out;
}

}  // namespace capsroute
