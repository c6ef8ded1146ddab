#include "capsroute/normalizers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace capsroute {

void Normalization::validate() const {
  if (kind != NormKind::MaxMin) return;
  if (!(lower < upper)) throw std::invalid_argument("max-min bounds require p < q");
  if (upper < 0.01 || upper > 1.0) throw std::invalid_argument("max-min upper bound q must lie in [0.01, 1]");
}

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::Softmax: return "softmax";
    case NormKind::MaxMin: return "maxmin";
    case NormKind::CenteredMaxMin: return "centered";
    case NormKind::ZScore: return "zscore";
    case NormKind::Sum: return "sum";
    case NormKind::AdjustedLog: return "adjlog";
    case NormKind::Wta: return "wta";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view name) {
  if (name == "softmax") return NormKind::Softmax;
  if (name == "maxmin" || name == "max_min") return NormKind::MaxMin;
  if (name == "centered" || name == "centered_maxmin" || name == "centered_max_min") {
    return NormKind::CenteredMaxMin;
  }
  if (name == "zscore" || name == "z_score") return NormKind::ZScore;
  if (name == "sum" || name == "sum_norm") return NormKind::Sum;
  if (name == "adjlog" || name == "adjusted_log") return NormKind::AdjustedLog;
  if (name == "wta" || name == "winner_take_all") return NormKind::Wta;
  throw std::invalid_argument("unknown normalization '" + std::string(name) + "'");
}

std::string_view to_string(NormAxis axis) {
  return axis == NormAxis::PerLowerCapsule ? "row" : "global";
}

NormAxis parse_norm_axis(std::string_view name) {
  if (name == "row") return NormAxis::PerLowerCapsule;
  if (name == "global") return NormAxis::Global;
  throw std::invalid_argument("unknown normalization axis '" + std::string(name) + "'");
}

namespace {

template <typename T>
void check_lengths(std::span<const T> b, std::span<T> c) {
  if (b.size() != c.size() || b.empty()) throw DimensionError("normalizer: input/output length mismatch");
}

}  // namespace

template <typename T>
void softmax(std::span<const T> b, std::span<T> c) {
  check_lengths(b, c);
  const T top = *std::max_element(b.begin(), b.end());
  T total = T(0);
  for (std::size_t j = 0; j < b.size(); ++j) {
    c[j] = std::exp(b[j] - top);
    total += c[j];
  }
  for (auto& x : c) x /= total;
}

template <typename T>
void max_min(std::span<const T> b, std::span<T> c, T p, T q) {
  check_lengths(b, c);
  const auto [lo_it, hi_it] = std::minmax_element(b.begin(), b.end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(c.begin(), c.end(), q);
    return;
  }
  const T range = hi - lo;
  const T width = q - p;
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (b[j] == hi) {
      c[j] = q;
    } else if (b[j] == lo) {
      c[j] = p;
    } else {
      c[j] = p + (b[j] - lo) / range * width;
    }
  }
}

template <typename T>
void centered_max_min(std::span<const T> b, std::span<T> c) {
  max_min(b, c, T(-1), T(1));
}

template <typename T>
void zscore(std::span<const T> b, std::span<T> c) {
  check_lengths(b, c);
  const auto [lo_it, hi_it] = std::minmax_element(b.begin(), b.end());
  if (!(*hi_it > *lo_it)) {
    std::fill(c.begin(), c.end(), T(0));
    return;
  }
  const T n = static_cast<T>(b.size());
  T mean = T(0);
  for (auto x : b) mean += x;
  mean /= n;
  T var = T(0);
  for (auto x : b) var += (x - mean) * (x - mean);
  const T sd = std::sqrt(var / n);
  for (std::size_t j = 0; j < b.size(); ++j) c[j] = (b[j] - mean) / sd;
}

template <typename T>
void sum_norm(std::span<const T> b, std::span<T> c) {
  check_lengths(b, c);
  T total = T(0);
  for (auto x : b) total += x;
  if (std::abs(total) < T(1e-12)) {
    std::fill(c.begin(), c.end(), T(1) / static_cast<T>(b.size()));
    return;
  }
  for (std::size_t j = 0; j < b.size(); ++j) c[j] = b[j] / total;
}

template <typename T>
void adjusted_log(std::span<const T> b, std::span<T> c) {
  check_lengths(b, c);
  const T lo = *std::min_element(b.begin(), b.end());
  for (std::size_t j = 0; j < b.size(); ++j) c[j] = std::log1p(b[j] - lo);
}

template <typename T>
void wta(std::span<const T> b, std::span<T> c) {
  check_lengths(b, c);
  const auto winner = static_cast<std::size_t>(std::max_element(b.begin(), b.end()) - b.begin());
  std::fill(c.begin(), c.end(), T(0));
  c[winner] = T(1);
}

template <typename T>
void normalize_row(const Normalization& norm, std::span<const T> b, std::span<T> c) {
  switch (norm.kind) {
    case NormKind::Softmax: softmax(b, c); break;
    case NormKind::MaxMin: max_min(b, c, static_cast<T>(norm.lower), static_cast<T>(norm.upper)); break;
    case NormKind::CenteredMaxMin: centered_max_min(b, c); break;
    case NormKind::ZScore: zscore(b, c); break;
    case NormKind::Sum: sum_norm(b, c); break;
    case NormKind::AdjustedLog: adjusted_log(b, c); break;
    case NormKind::Wta: wta(b, c); break;
  }
}

template <typename T>
void normalize_logits(const Normalization& norm, std::span<const T> b, std::span<T> c, std::size_t batch,
                      std::size_t lower, std::size_t parents) {
  if (b.size() != batch * lower * parents || c.size() != b.size()) {
    throw DimensionError("normalize_logits: buffer size does not match batch x lower x parents");
  }
  const std::size_t group = norm.axis == NormAxis::PerLowerCapsule ? parents : lower * parents;
  for (std::size_t start = 0; start < b.size(); start += group) {
    normalize_row(norm, b.subspan(start, group), c.subspan(start, group));
  }
}

template <typename T>
Tensor<T> normalize(const Normalization& norm, const Tensor<T>& b) {
  if (b.rank() == 0) throw DimensionError("normalize: rank-0 input");
  const std::size_t parents = b.dim(b.rank() - 1);
  std::size_t lower = 1;
  if (norm.axis == NormAxis::Global) {
    if (b.rank() < 2) throw DimensionError("global normalization needs [.. x I x J] logits");
    lower = b.dim(b.rank() - 2);
  }
  const std::size_t batch = b.size() / (lower * parents);
  Tensor<T> c(b.shape());
  normalize_logits<T>(norm, b.data(), c.data(), batch, lower, parents);
  return c;
}

#define CAPSROUTE_INSTANTIATE(T)                                                               \
  template void softmax(std::span<const T>, std::span<T>);                                     \
  template void max_min(std::span<const T>, std::span<T>, T, T);                               \
  template void centered_max_min(std::span<const T>, std::span<T>);                            \
  template void zscore(std::span<const T>, std::span<T>);                                      \
  template void sum_norm(std::span<const T>, std::span<T>);                                    \
  template void adjusted_log(std::span<const T>, std::span<T>);                                \
  template void wta(std::span<const T>, std::span<T>);                                         \
  template void normalize_row(const Normalization&, std::span<const T>, std::span<T>);         \
  template void normalize_logits(const Normalization&, std::span<const T>, std::span<T>, std::size_t, \
                                 std::size_t, std::size_t);                                    \
  template Tensor<T> normalize(const Normalization&, const Tensor<T>&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
