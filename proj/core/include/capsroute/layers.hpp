#pragma once

#include <cstddef>

#include "capsroute/rng.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

enum class Activation { None, Relu, Sigmoid };

/// 2-D convolution with valid (no) padding. kernels: [out_ch x in_ch x k x k].
template <typename T>
struct ConvLayer {
  Tensor<T> kernels;
  Tensor<T> bias;  // [out_ch]
  std::size_t stride = 1;
  Activation activation = Activation::None;

  std::size_t out_channels() const { return kernels.dim(0); }
  std::size_t in_channels() const { return kernels.dim(1); }
  std::size_t kernel_size() const { return kernels.dim(2); }
  /// Throws DimensionError unless k is odd, square, stride is 1 or 2 and the
  /// bias matches out_ch. Sigmoid is not a supported conv activation.
  void validate() const;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;  // empty when not requested
  Tensor<T> kernels;
  Tensor<T> bias;
};

/// Output extent of a valid convolution: floor((in - k) / stride) + 1, matching
/// the usual "VALID" convention (20 -> 6 for k = 9, stride 2). Trailing input
/// rows/columns that do not fit a full window are ignored.
std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride);

/// x: [B x C x H x W] -> [B x out_ch x H' x W'].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvLayer<T>& layer);

/// `out` is the tensor conv2d_forward returned for `x`; it supplies the
/// activation derivative. The input gradient is skipped when `need_input_grad`
/// is false (first layer of a network).
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& out,
                             const ConvLayer<T>& layer, bool need_input_grad = true);

/// Fully-connected layer, y = act(x W^T + b). weights: [out x in].
template <typename T>
struct DenseLayer {
  Tensor<T> weights;
  Tensor<T> bias;  // [out]
  Activation activation = Activation::None;

  std::size_t out_features() const { return weights.dim(0); }
  std::size_t in_features() const { return weights.dim(1); }
  void validate() const;
};

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// x: [B x in] -> [B x out].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const DenseLayer<T>& layer);

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& out,
                             const DenseLayer<T>& layer, bool need_input_grad = true);

/// Truncated-normal kernels (|z| <= 2 sd), zero bias.
template <typename T>
ConvLayer<T> make_conv_layer(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t stride,
                             Activation act, double stddev, Rng& rng);

template <typename T>
DenseLayer<T> make_dense_layer(std::size_t out, std::size_t in, Activation act, double stddev, Rng& rng);

/// Applies `act` in place.
template <typename T>
void apply_activation(std::span<T> values, Activation act);

/// grad *= act'(y) in place, given the activated outputs y. ReLU'(0) = 0.
template <typename T>
void activation_backward(std::span<T> grad, std::span<const T> y, Activation act);

}  // namespace capsroute
