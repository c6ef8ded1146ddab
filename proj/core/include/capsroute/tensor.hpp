#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsroute {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes, ranks or axes are inconsistent.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation would produce NaN/Inf or divides by zero.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Storage is always contiguous; there are no strided
/// views. A rank-0 tensor holds a single scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);
  Tensor(Shape shape, std::initializer_list<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  const T& operator[](std::size_t flat) const noexcept { return data_[flat]; }

  /// Multi-index access with bounds checking.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  void fill(T value);
  void reshape(Shape shape);
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  /// Throws NumericError naming `what` if any element is NaN/Inf.
  void require_finite(const char* what) const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t k = 0; k < data_.size(); ++k) out[k] = static_cast<U>(data_[k]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

enum class Transpose { No, Yes };

/// 2-D matrix product. Summation order over the inner dimension is fixed for a
/// given build, so results are bitwise reproducible run to run.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta = Transpose::No,
                 Transpose tb = Transpose::No);

/// C = alpha * op(A) * op(B) + beta * C on raw row-major buffers. op(A) is m x k
/// and op(B) is k x n. Used by the layer kernels.
template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

enum class ReduceKind { Sum, Max, Min, Mean };

/// Reduces along `axis`, removing it from the shape. Summation runs in index
/// order along the axis.
template <typename T>
Tensor<T> reduce(const Tensor<T>& t, std::size_t axis, ReduceKind kind);

// Elementwise maps. Binary operands broadcast only over trailing singleton
// axes: `b` must have the same rank as `a`, and for some m every axis k < m has
// b.dim(k) == a.dim(k) while every axis k >= m has b.dim(k) == 1. A rank-0 `b`
// broadcasts everywhere.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Any zero in the divisor is an error, never a saturated result.
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> exp(const Tensor<T>& t);
/// Non-positive input raises NumericError.
template <typename T> Tensor<T> log(const Tensor<T>& t);
template <typename T> Tensor<T> relu(const Tensor<T>& t);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& t);
template <typename T> Tensor<T> scale(const Tensor<T>& t, T factor);
template <typename T> Tensor<T> clip(const Tensor<T>& t, T lo, T hi);

/// Concatenates along axis 0.
template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace capsroute
