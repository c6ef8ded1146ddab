#include "capsroute/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace capsroute {

template <typename T>
void squash_vector(std::span<const T> s, std::span<T> v) {
  T sq = T(0);
  for (auto x : s) sq += x * x;
  const T norm = std::sqrt(sq + static_cast<T>(kSquashEpsilon));
  // |s|^2 / (1 + |s|^2) rounds to 1 for very long s in single precision.
  const T ratio = std::min(sq / (T(1) + sq), T(1) - std::numeric_limits<T>::epsilon());
  const T factor = ratio / norm;
  for (std::size_t d = 0; d < s.size(); ++d) v[d] = factor * s[d];
}

template <typename T>
void squash_backward_vector(std::span<const T> s, std::span<const T> grad_v, std::span<T> grad_s) {
  // v = f(q) s with q = |s|^2 and f(q) = q / ((1 + q) sqrt(q + eps)), so
  // dv_a/ds_b = f delta_ab + 2 f'(q) s_a s_b.
  const T eps = static_cast<T>(kSquashEpsilon);
  T sq = T(0);
  T dot = T(0);
  for (std::size_t d = 0; d < s.size(); ++d) {
    sq += s[d] * s[d];
    dot += s[d] * grad_v[d];
  }
  const T root = std::sqrt(sq + eps);
  const T f = sq / ((T(1) + sq) * root);
  const T df = T(1) / ((T(1) + sq) * root) - f / (T(1) + sq) - f / (T(2) * (sq + eps));
  const T radial = T(2) * df * dot;
  for (std::size_t d = 0; d < s.size(); ++d) grad_s[d] = f * grad_v[d] + radial * s[d];
}

template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  if (s.rank() == 0) throw DimensionError("squash needs at least one axis");
  const std::size_t depth = s.dim(s.rank() - 1);
  Tensor<T> v(s.shape());
  for (std::size_t start = 0; start < s.size(); start += depth) {
    squash_vector<T>(s.data().subspan(start, depth), v.data().subspan(start, depth));
  }
  return v;
}

template <typename T>
Tensor<T> squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v) {
  if (s.shape() != grad_v.shape() || s.rank() == 0) throw DimensionError("squash_backward shape mismatch");
  const std::size_t depth = s.dim(s.rank() - 1);
  Tensor<T> grad_s(s.shape());
  for (std::size_t start = 0; start < s.size(); start += depth) {
    squash_backward_vector<T>(s.data().subspan(start, depth), grad_v.data().subspan(start, depth),
                              grad_s.data().subspan(start, depth));
  }
  return grad_s;
}

namespace {

template <typename T>
void check_u_hat(const Tensor<T>& u_hat, int iterations) {
  if (u_hat.rank() != 4) throw DimensionError("u_hat must be [B x I x J x D], got " + shape_string(u_hat.shape()));
  if (iterations < 1) throw std::invalid_argument("routing needs at least one iteration");
}

// s = sum_i c_ij u_hat_{j|i}, summed in ascending i; then v = squash(s).
template <typename T>
void weighted_sum_and_squash(RoutingState<T>& st) {
  const std::size_t B = st.batch(), I = st.lower(), J = st.parents(), D = st.depth();
  st.s.fill(T(0));
  for (std::size_t n = 0; n < B; ++n) {
    T* s = st.s.raw() + n * J * D;
    for (std::size_t i = 0; i < I; ++i) {
      const T* u = st.u_hat.raw() + (n * I + i) * J * D;
      const T* c = st.c.raw() + (n * I + i) * J;
      for (std::size_t j = 0; j < J; ++j) {
        const T cij = c[j];
        for (std::size_t d = 0; d < D; ++d) s[j * D + d] += cij * u[j * D + d];
      }
    }
  }
  for (std::size_t start = 0; start < st.s.size(); start += D) {
    squash_vector<T>(st.s.data().subspan(start, D), st.v.data().subspan(start, D));
  }
}

// b_ij += u_hat_{j|i} . v_j
template <typename T>
void update_logits(RoutingState<T>& st) {
  const std::size_t B = st.batch(), I = st.lower(), J = st.parents(), D = st.depth();
  for (std::size_t n = 0; n < B; ++n) {
    const T* v = st.v.raw() + n * J * D;
    for (std::size_t i = 0; i < I; ++i) {
      const T* u = st.u_hat.raw() + (n * I + i) * J * D;
      T* b = st.b.raw() + (n * I + i) * J;
      for (std::size_t j = 0; j < J; ++j) {
        T dot = T(0);
        for (std::size_t d = 0; d < D; ++d) dot += u[j * D + d] * v[j * D + d];
        b[j] += dot;
      }
    }
  }
}

template <typename T>
RoutingState<T> make_state(Tensor<T> u_hat) {
  RoutingState<T> st;
  const std::size_t B = u_hat.dim(0), I = u_hat.dim(1), J = u_hat.dim(2), D = u_hat.dim(3);
  st.u_hat = std::move(u_hat);
  st.b = Tensor<T>({B, I, J});
  st.c = Tensor<T>({B, I, J});
  st.s = Tensor<T>({B, J, D});
  st.v = Tensor<T>({B, J, D});
  return st;
}

}  // namespace

template <typename T>
RoutingResult<T> route_softmax(Tensor<T> u_hat, int iterations, bool capture_trace) {
  check_u_hat(u_hat, iterations);
  RoutingResult<T> result{make_state(std::move(u_hat)), {}};
  auto& st = result.state;
  const Normalization norm{NormKind::Softmax};
  for (int it = 0; it < iterations; ++it) {
    normalize_logits<T>(norm, st.b.data(), st.c.data(), st.batch(), st.lower(), st.parents());
    if (capture_trace) {
      result.trace.logits.push_back(st.b);
      result.trace.coefficients.push_back(st.c);
    }
    weighted_sum_and_squash(st);
    update_logits(st);
  }
  return result;
}

template <typename T>
RoutingResult<T> route_maxmin(Tensor<T> u_hat, int iterations, const Normalization& norm,
                              double initial_coefficient, bool capture_trace) {
  check_u_hat(u_hat, iterations);
  if (norm.kind == NormKind::Softmax) {
    throw std::invalid_argument("route_maxmin: softmax uses the softmax loop order");
  }
  norm.validate();
  RoutingResult<T> result{make_state(std::move(u_hat)), {}};
  auto& st = result.state;
  st.c.fill(static_cast<T>(initial_coefficient));
  Tensor<T> next(st.c.shape());
  for (int it = 0; it < iterations; ++it) {
    weighted_sum_and_squash(st);
    update_logits(st);
    normalize_logits<T>(norm, st.b.data(), next.data(), st.batch(), st.lower(), st.parents());
    if (capture_trace) {
      result.trace.logits.push_back(st.b);
      result.trace.coefficients.push_back(next);
    }
    // v stays tied to the coefficients it was computed from; the last
    // normalization is not fed back.
    if (it + 1 < iterations) std::swap(st.c, next);
  }
  return result;
}

template <typename T>
RoutingResult<T> route(Tensor<T> u_hat, const RoutingOptions& options) {
  if (options.norm.kind == NormKind::Softmax) {
    return route_softmax(std::move(u_hat), options.iterations, options.capture_trace);
  }
  return route_maxmin(std::move(u_hat), options.iterations, options.norm, options.initial_coefficient,
                      options.capture_trace);
}

template <typename T>
RoutingState<T> route_with_coefficients(Tensor<T> u_hat, const Tensor<T>& c) {
  check_u_hat(u_hat, 1);
  auto st = make_state(std::move(u_hat));
  if (c.shape() != st.c.shape()) {
    throw DimensionError("coefficients " + shape_string(c.shape()) + " do not match u_hat " +
                         shape_string(st.u_hat.shape()));
  }
  st.c = c;
  weighted_sum_and_squash(st);
  return st;
}

template <typename T>
Tensor<T> routing_backward(const Tensor<T>& grad_v, const RoutingState<T>& state) {
  if (grad_v.shape() != state.v.shape()) {
    throw DimensionError("routing_backward: grad_v " + shape_string(grad_v.shape()) + " vs v " +
                         shape_string(state.v.shape()));
  }
  const std::size_t B = state.batch(), I = state.lower(), J = state.parents(), D = state.depth();
  const Tensor<T> grad_s = squash_backward(state.s, grad_v);
  Tensor<T> grad_u(state.u_hat.shape());
  for (std::size_t n = 0; n < B; ++n) {
    const T* gs = grad_s.raw() + n * J * D;
    for (std::size_t i = 0; i < I; ++i) {
      const T* c = state.c.raw() + (n * I + i) * J;
      T* gu = grad_u.raw() + (n * I + i) * J * D;
      for (std::size_t j = 0; j < J; ++j) {
        for (std::size_t d = 0; d < D; ++d) gu[j * D + d] = c[j] * gs[j * D + d];
      }
    }
  }
  return grad_u;
}

#define CAPSROUTE_INSTANTIATE(T)                                                                   \
  template void squash_vector(std::span<const T>, std::span<T>);                                   \
  template void squash_backward_vector(std::span<const T>, std::span<const T>, std::span<T>);      \
  template Tensor<T> squash(const Tensor<T>&);                                                     \
  template Tensor<T> squash_backward(const Tensor<T>&, const Tensor<T>&);                          \
  template RoutingResult<T> route_softmax(Tensor<T>, int, bool);                                   \
  template RoutingResult<T> route_maxmin(Tensor<T>, int, const Normalization&, double, bool);      \
  template RoutingResult<T> route(Tensor<T>, const RoutingOptions&);                               \
  template RoutingState<T> route_with_coefficients(Tensor<T>, const Tensor<T>&);                   \
  template Tensor<T> routing_backward(const Tensor<T>&, const RoutingState<T>&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
