#pragma once

#include <span>
#include <string>
#include <string_view>

#include "capsroute/tensor.hpp"

namespace capsroute {

/// Strategies for turning routing logits b_i into coefficients c_i.
enum class NormKind { Softmax, MaxMin, CenteredMaxMin, ZScore, Sum, AdjustedLog, Wta };

/// Which logits form one normalization group: the J parent logits of a single
/// lower capsule (default), or every I x J logit of one sample.
enum class NormAxis { PerLowerCapsule, Global };

struct Normalization {
  NormKind kind = NormKind::MaxMin;
  double lower = 0.0;  // p, max-min only
  double upper = 1.0;  // q, max-min only
  NormAxis axis = NormAxis::PerLowerCapsule;

  /// Requires p < q and q in [0.01, 1] for max-min.
  void validate() const;
};

/// Short names used by configs and the CLI: softmax, maxmin, centered, zscore,
/// sum, adjlog, wta.
std::string_view to_string(NormKind kind);
/// Accepts the short names and the long spellings (max_min, centered_max_min,
/// z_score, sum_norm, adjusted_log, winner_take_all).
NormKind parse_norm_kind(std::string_view name);
std::string_view to_string(NormAxis axis);
NormAxis parse_norm_axis(std::string_view name);

// Row normalizers. `b` and `c` have equal length and must not alias.

/// exp(b_j) / sum_k exp(b_k), computed after subtracting max(b).
template <typename T>
void softmax(std::span<const T> b, std::span<T> c);

/// p + (b - min) / (max - min) * (q - p). The extremes are assigned p and q
/// exactly. A constant row maps to all q, matching the all-ones coefficients
/// the max-min routing loop starts from.
template <typename T>
void max_min(std::span<const T> b, std::span<T> c, T p = T(0), T q = T(1));

/// Affine map onto [-1, 1]; a constant row maps to all 1.
template <typename T>
void centered_max_min(std::span<const T> b, std::span<T> c);

/// (b - mean) / std with the population std; a constant row maps to zeros.
template <typename T>
void zscore(std::span<const T> b, std::span<T> c);

/// b / sum(b); |sum(b)| < 1e-12 maps to the uniform 1/J.
template <typename T>
void sum_norm(std::span<const T> b, std::span<T> c);

/// log(1 + b - min(b)).
template <typename T>
void adjusted_log(std::span<const T> b, std::span<T> c);

/// One-hot at argmax(b); ties go to the lowest index.
template <typename T>
void wta(std::span<const T> b, std::span<T> c);

template <typename T>
void normalize_row(const Normalization& norm, std::span<const T> b, std::span<T> c);

/// Normalizes logits laid out as [batch x lower x parents] into `c` (same
/// layout) according to `norm.axis`.
template <typename T>
void normalize_logits(const Normalization& norm, std::span<const T> b, std::span<T> c, std::size_t batch,
                      std::size_t lower, std::size_t parents);

/// Tensor form: normalizes along the last axis (per lower capsule) or over the
/// last two axes (global).
template <typename T>
Tensor<T> normalize(const Normalization& norm, const Tensor<T>& b);

}  // namespace capsroute
