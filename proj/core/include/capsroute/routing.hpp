#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capsroute/normalizers.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// Guard added to ||s||^2 before the square root inside squash.
inline constexpr double kSquashEpsilon = 1e-9;

/// v = (|s|^2 / (1 + |s|^2)) * s / sqrt(|s|^2 + eps). |v| < 1 and v = 0 at s = 0.
template <typename T>
void squash_vector(std::span<const T> s, std::span<T> v);

/// grad_s = (dv/ds)^T grad_v for the squash above.
template <typename T>
void squash_backward_vector(std::span<const T> s, std::span<const T> grad_v, std::span<T> grad_s);

/// Squash along the last axis.
template <typename T>
Tensor<T> squash(const Tensor<T>& s);

template <typename T>
Tensor<T> squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v);

/// Everything one routing invocation produced. Shapes, with B samples, I lower
/// capsules, J parents and D parent dimensions:
///   u_hat [B x I x J x D], b and c [B x I x J], s and v [B x J x D].
/// `c` holds the coefficients of the weighted sum that produced `v`; the
/// backward pass treats them as constants.
template <typename T>
struct RoutingState {
  Tensor<T> u_hat;
  Tensor<T> b;
  Tensor<T> c;
  Tensor<T> s;
  Tensor<T> v;

  std::size_t batch() const { return u_hat.dim(0); }
  std::size_t lower() const { return u_hat.dim(1); }
  std::size_t parents() const { return u_hat.dim(2); }
  std::size_t depth() const { return u_hat.dim(3); }
};

/// Per-iteration snapshots. Entry t holds the logits fed to that iteration's
/// normalization and the coefficients it produced, so coefficients[t] ==
/// normalize(logits[t]) always. Under softmax routing that is the normalization
/// at the top of the loop; under the max-min loop order it is the one at the
/// bottom.
template <typename T>
struct RoutingTrace {
  std::vector<Tensor<T>> logits;
  std::vector<Tensor<T>> coefficients;

  std::size_t iterations() const { return logits.size(); }
  bool empty() const { return logits.empty(); }
};

struct RoutingOptions {
  Normalization norm{NormKind::Softmax};
  int iterations = 3;
  /// Starting coefficients for the max-min loop order (all non-softmax kinds).
  double initial_coefficient = 1.0;
  bool capture_trace = false;
};

template <typename T>
struct RoutingResult {
  RoutingState<T> state;
  RoutingTrace<T> trace;
};

/// Softmax procedure: b = 0; repeat r times { c = softmax(b); s = sum_i c u_hat;
/// v = squash(s); b += u_hat . v }.
template <typename T>
RoutingResult<T> route_softmax(Tensor<T> u_hat, int iterations, bool capture_trace = false);

/// Max-min loop order: c = initial; repeat r times { s = sum_i c u_hat;
/// v = squash(s); b += u_hat . v; c = normalize(b) }. The returned v comes from
/// the coefficients normalized at the end of iteration r-1 (or the initial ones
/// when r = 1); the final normalization only reaches the trace. Hosts every
/// non-softmax normalizer.
template <typename T>
RoutingResult<T> route_maxmin(Tensor<T> u_hat, int iterations, const Normalization& norm,
                              double initial_coefficient = 1.0, bool capture_trace = false);

/// Dispatches on options.norm.kind.
template <typename T>
RoutingResult<T> route(Tensor<T> u_hat, const RoutingOptions& options);

/// One weighted sum and squash with externally supplied coefficients.
template <typename T>
RoutingState<T> route_with_coefficients(Tensor<T> u_hat, const Tensor<T>& c);

/// Gradient of v with respect to u_hat through the final weighted sum, with the
/// coefficients held fixed: grad u_hat_{j|i} = c_ij * squash'(s_j)^T grad_v_j.
template <typename T>
Tensor<T> routing_backward(const Tensor<T>& grad_v, const RoutingState<T>& state);

}  // namespace capsroute
