#include "capsroute/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

namespace capsroute {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "x" : "") << shape[k];
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> data)
    : Tensor(std::move(shape), std::vector<T>(data)) {}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_string(shape_));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_string(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(index)];
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  check_dims(shape);
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
void Tensor<T>::require_finite(const char* what) const {
  if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value in result");
}

// ---------------------------------------------------------------------------
// matmul / gemm

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat> cm(c, mi, ni);
  if (beta == T(0)) {
    cm.setZero();
  } else if (beta != T(1)) {
    cm *= beta;
  }
  const bool at = ta == Transpose::Yes;
  const bool bt = tb == Transpose::Yes;
  ConstMap am(a, at ? ki : mi, at ? mi : ki);
  ConstMap bm(b, bt ? ni : ki, bt ? ki : ni);
  if (!at && !bt) {
    cm.noalias() += alpha * am * bm;
  } else if (at && !bt) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else if (!at && bt) {
    cm.noalias() += alpha * am * bm.transpose();
  } else {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta, Transpose tb) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  const bool at = ta == Transpose::Yes;
  const bool bt = tb == Transpose::Yes;
  const std::size_t m = at ? a.dim(1) : a.dim(0);
  const std::size_t k = at ? a.dim(0) : a.dim(1);
  const std::size_t kb = bt ? b.dim(1) : b.dim(0);
  const std::size_t n = bt ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  gemm(ta, tb, m, n, k, T(1), a.raw(), b.raw(), T(0), out.raw());
  out.require_finite("matmul");
  return out;
}

// ---------------------------------------------------------------------------
// reduce

template <typename T>
Tensor<T> reduce(const Tensor<T>& t, std::size_t axis, ReduceKind kind) {
  if (axis >= t.rank()) {
    throw DimensionError("reduce axis " + std::to_string(axis) + " invalid for " + shape_string(t.shape()));
  }
  const auto& shape = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  const std::size_t len = shape[axis];

  Shape out_shape;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k != axis) out_shape.push_back(shape[k]);
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const T* p = t.raw() + o * len * inner + in;
      T acc = p[0];
      for (std::size_t l = 1; l < len; ++l) {
        const T x = p[l * inner];
        switch (kind) {
          case ReduceKind::Sum:
          case ReduceKind::Mean: acc += x; break;
          case ReduceKind::Max: acc = std::max(acc, x); break;
          case ReduceKind::Min: acc = std::min(acc, x); break;
        }
      }
      if (kind == ReduceKind::Mean) acc /= static_cast<T>(len);
      out[o * inner + in] = acc;
    }
  }
  out.require_finite("reduce");
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

// Number of elements of `a` covered by one element of `b` (the trailing block).
template <typename T>
std::size_t broadcast_block(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() == 0) return a.size();
  if (a.rank() != b.rank()) {
    throw DimensionError("broadcast requires equal rank: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::size_t m = a.rank();
  while (m > 0 && b.shape()[m - 1] == 1) --m;
  std::size_t block = 1;
  for (std::size_t k = 0; k < a.rank(); ++k) {
    if (k < m && b.shape()[k] != a.shape()[k]) {
      throw DimensionError("shapes not broadcast-compatible: " + shape_string(a.shape()) + " vs " +
                           shape_string(b.shape()));
    }
    if (k >= m) block *= a.shape()[k];
  }
  return block;
}

template <typename T, typename F>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
  const std::size_t block = broadcast_block(a, b);
  Tensor<T> out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k], b[k / block]);
  out.require_finite(what);
  return out;
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& t, F f, const char* what) {
  Tensor<T> out(t.shape());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = f(t[k]);
  out.require_finite(what);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, std::plus<T>{}, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, std::minus<T>{}, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, std::multiplies<T>{}, "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (b[k] == T(0)) throw NumericError("div: division by zero at divisor element " + std::to_string(k));
  }
  return binary(a, b, std::divides<T>{}, "div");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& t) {
  return unary(t, [](T x) { return std::exp(x); }, "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& t) {
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (!(t[k] > T(0))) throw NumericError("log: non-positive argument at element " + std::to_string(k));
  }
  return unary(t, [](T x) { return std::log(x); }, "log");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& t) {
  return unary(t, [](T x) { return x > T(0) ? x : T(0); }, "relu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& t) {
  return unary(t,
               [](T x) {
                 if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
                 const T e = std::exp(x);
                 return e / (T(1) + e);
               },
               "sigmoid");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T factor) {
  return unary(t, [factor](T x) { return x * factor; }, "scale");
}

template <typename T>
Tensor<T> clip(const Tensor<T>& t, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return unary(t, [lo, hi](T x) { return std::clamp(x, lo, hi); }, "clip");
}

template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw DimensionError("concat0 shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor<T>(std::move(shape), std::move(data));
}

#define CAPSROUTE_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Transpose, Transpose);             \
  template void gemm(Transpose, Transpose, std::size_t, std::size_t, std::size_t, T, const T*,     \
                     const T*, T, T*);                                                             \
  template Tensor<T> reduce(const Tensor<T>&, std::size_t, ReduceKind);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> clip(const Tensor<T>&, T, T);                                                 \
  template Tensor<T> concat0(const Tensor<T>&, const Tensor<T>&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
