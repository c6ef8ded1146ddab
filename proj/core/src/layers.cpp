#include "capsroute/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace capsroute {

namespace {

// Upper bound on im2col buffer elements; batches are processed in chunks of
// whole images that fit.
constexpr std::size_t kColumnBudget = std::size_t{1} << 21;

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, k, stride;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * k * k; }
  std::size_t positions() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry geometry(const Tensor<T>& x, const ConvLayer<T>& layer) {
  layer.validate();
  if (x.rank() != 4) throw DimensionError("conv2d expects [B x C x H x W], got " + shape_string(x.shape()));
  if (x.dim(1) != layer.in_channels()) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(x.shape()) + ", kernels " +
                         shape_string(layer.kernels.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), layer.out_channels(), layer.kernel_size(),
                 layer.stride, 0, 0};
  g.out_h = conv_output_extent(g.height, g.k, g.stride);
  g.out_w = conv_output_extent(g.width, g.k, g.stride);
  return g;
}

std::size_t images_per_chunk(const ConvGeometry& g) {
  const std::size_t per_image = g.patch() * g.positions();
  return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_image, 1), 1, g.batch);
}

// col[(c*k + ky)*k + kx][n*P + oy*out_w + ox] = x[first + n][c][oy*s + ky][ox*s + kx]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t first, std::size_t count, T* col) {
  const std::size_t positions = g.positions();
  const std::size_t cols = count * positions;
  const std::size_t plane = g.height * g.width;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t n = 0; n < count; ++n) {
          const T* src = x + ((first + n) * g.channels + c) * plane;
          T* dst = row + n * positions;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const T* line = src + (oy * g.stride + ky) * g.width + kx;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[oy * g.out_w + ox] = line[ox * g.stride];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t first, std::size_t count, T* x) {
  const std::size_t positions = g.positions();
  const std::size_t cols = count * positions;
  const std::size_t plane = g.height * g.width;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t n = 0; n < count; ++n) {
          T* dst = x + ((first + n) * g.channels + c) * plane;
          const T* src = row + n * positions;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            T* line = dst + (oy * g.stride + ky) * g.width + kx;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) line[ox * g.stride] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride) {
  if (stride == 0) throw DimensionError("conv stride must be positive");
  if (in < k) {
    throw DimensionError("conv input extent " + std::to_string(in) + " smaller than kernel " +
                         std::to_string(k));
  }
  return (in - k) / stride + 1;
}

template <typename T>
void apply_activation(std::span<T> values, Activation act) {
  switch (act) {
    case Activation::None: break;
    case Activation::Relu:
      for (auto& v : values) v = v > T(0) ? v : T(0);
      break;
    case Activation::Sigmoid:
      for (auto& v : values) v = sigmoid_scalar(v);
      break;
  }
}

template <typename T>
void activation_backward(std::span<T> grad, std::span<const T> y, Activation act) {
  switch (act) {
    case Activation::None: break;
    case Activation::Relu:
      for (std::size_t k = 0; k < grad.size(); ++k) {
        if (!(y[k] > T(0))) grad[k] = T(0);
      }
      break;
    case Activation::Sigmoid:
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] *= y[k] * (T(1) - y[k]);
      break;
  }
}

template <typename T>
void ConvLayer<T>::validate() const {
  if (kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3)) {
    throw DimensionError("conv kernels must be [out x in x k x k], got " + shape_string(kernels.shape()));
  }
  if (kernels.dim(2) % 2 == 0) throw DimensionError("conv kernel size must be odd");
  if (stride != 1 && stride != 2) throw DimensionError("conv stride must be 1 or 2");
  if (bias.rank() != 1 || bias.dim(0) != kernels.dim(0)) {
    throw DimensionError("conv bias must be [out_ch], got " + shape_string(bias.shape()));
  }
  if (activation == Activation::Sigmoid) throw DimensionError("conv activation must be relu or none");
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvLayer<T>& layer) {
  const auto g = geometry(x, layer);
  const std::size_t positions = g.positions();
  Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w});

  const std::size_t chunk = images_per_chunk(g);
  std::vector<T> col(g.patch() * chunk * positions);
  std::vector<T> prod(g.out_channels * chunk * positions);
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    const std::size_t cols = count * positions;
    im2col(x.raw(), g, first, count, col.data());
    gemm(Transpose::No, Transpose::No, g.out_channels, cols, g.patch(), T(1), layer.kernels.raw(), col.data(),
         T(0), prod.data());
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const T* src = prod.data() + o * cols + n * positions;
        T* dst = out.raw() + ((first + n) * g.out_channels + o) * positions;
        const T b = layer.bias[o];
        for (std::size_t p = 0; p < positions; ++p) dst[p] = src[p] + b;
      }
    }
  }
  apply_activation(out.data(), layer.activation);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& out,
                             const ConvLayer<T>& layer, bool need_input_grad) {
  const auto g = geometry(x, layer);
  const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expected || out.shape() != expected) {
    throw DimensionError("conv2d_backward: grad/out shape " + shape_string(grad_out.shape()) + " expected " +
                         shape_string(expected));
  }
  const std::size_t positions = g.positions();

  Tensor<T> grad_pre = grad_out;
  activation_backward(grad_pre.data(), out.data(), layer.activation);

  ConvGrads<T> grads;
  grads.kernels = Tensor<T>(layer.kernels.shape());
  grads.bias = Tensor<T>({g.out_channels});
  if (need_input_grad) grads.input = Tensor<T>(x.shape());

  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const T* src = grad_pre.raw() + (b * g.out_channels + o) * positions;
      T acc = T(0);
      for (std::size_t p = 0; p < positions; ++p) acc += src[p];
      grads.bias[o] += acc;
    }
  }

  const std::size_t chunk = images_per_chunk(g);
  std::vector<T> col(g.patch() * chunk * positions);
  std::vector<T> gmat(g.out_channels * chunk * positions);
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    const std::size_t cols = count * positions;
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const T* src = grad_pre.raw() + ((first + n) * g.out_channels + o) * positions;
        std::copy(src, src + positions, gmat.data() + o * cols + n * positions);
      }
    }
    im2col(x.raw(), g, first, count, col.data());
    gemm(Transpose::No, Transpose::Yes, g.out_channels, g.patch(), cols, T(1), gmat.data(), col.data(),
         first == 0 ? T(0) : T(1), grads.kernels.raw());
    if (need_input_grad) {
      gemm(Transpose::Yes, Transpose::No, g.patch(), cols, g.out_channels, T(1), layer.kernels.raw(),
           gmat.data(), T(0), col.data());
      col2im_add(col.data(), g, first, count, grads.input.raw());
    }
  }
  return grads;
}

template <typename T>
void DenseLayer<T>::validate() const {
  if (weights.rank() != 2) throw DimensionError("dense weights must be [out x in]");
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(0)) {
    throw DimensionError("dense bias must be [out], got " + shape_string(bias.shape()));
  }
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const DenseLayer<T>& layer) {
  layer.validate();
  if (x.rank() != 2 || x.dim(1) != layer.in_features()) {
    throw DimensionError("dense_forward: input " + shape_string(x.shape()) + " vs weights " +
                         shape_string(layer.weights.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t out_f = layer.out_features();
  Tensor<T> y({batch, out_f});
  gemm(Transpose::No, Transpose::Yes, batch, out_f, layer.in_features(), T(1), x.raw(), layer.weights.raw(),
       T(0), y.raw());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_f; ++o) y[b * out_f + o] += layer.bias[o];
  }
  apply_activation(y.data(), layer.activation);
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& out,
                             const DenseLayer<T>& layer, bool need_input_grad) {
  layer.validate();
  const std::size_t batch = x.dim(0);
  const std::size_t out_f = layer.out_features();
  const std::size_t in_f = layer.in_features();
  const Shape expected{batch, out_f};
  if (x.rank() != 2 || x.dim(1) != in_f || grad_out.shape() != expected || out.shape() != expected) {
    throw DimensionError("dense_backward: inconsistent shapes");
  }
  Tensor<T> grad_pre = grad_out;
  activation_backward(grad_pre.data(), out.data(), layer.activation);

  DenseGrads<T> grads;
  grads.weights = Tensor<T>({out_f, in_f});
  gemm(Transpose::Yes, Transpose::No, out_f, in_f, batch, T(1), grad_pre.raw(), x.raw(), T(0),
       grads.weights.raw());
  grads.bias = reduce(grad_pre, 0, ReduceKind::Sum);
  if (need_input_grad) {
    grads.input = Tensor<T>({batch, in_f});
    gemm(Transpose::No, Transpose::No, batch, in_f, out_f, T(1), grad_pre.raw(), layer.weights.raw(), T(0),
         grads.input.raw());
  }
  return grads;
}

template <typename T>
ConvLayer<T> make_conv_layer(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t stride,
                             Activation act, double stddev, Rng& rng) {
  ConvLayer<T> layer{Tensor<T>({out_ch, in_ch, k, k}), Tensor<T>({out_ch}), stride, act};
  for (auto& w : layer.kernels.data()) w = static_cast<T>(rng.truncated_normal(stddev));
  layer.validate();
  return layer;
}

template <typename T>
DenseLayer<T> make_dense_layer(std::size_t out, std::size_t in, Activation act, double stddev, Rng& rng) {
  DenseLayer<T> layer{Tensor<T>({out, in}), Tensor<T>({out}), act};
  for (auto& w : layer.weights.data()) w = static_cast<T>(rng.truncated_normal(stddev));
  return layer;
}

#define CAPSROUTE_INSTANTIATE(T)                                                                      \
  template struct ConvLayer<T>;                                                                       \
  template struct DenseLayer<T>;                                                                      \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const ConvLayer<T>&);                           \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                        const ConvLayer<T>&, bool);                                   \
  template Tensor<T> dense_forward(const Tensor<T>&, const DenseLayer<T>&);                           \
  template DenseGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                        const DenseLayer<T>&, bool);                                  \
  template ConvLayer<T> make_conv_layer(std::size_t, std::size_t, std::size_t, std::size_t, Activation, \
                                        double, Rng&);                                                \
  template DenseLayer<T> make_dense_layer(std::size_t, std::size_t, Activation, double, Rng&);        \
  template void apply_activation(std::span<T>, Activation);                                          \
  template void activation_backward(std::span<T>, std::span<const T>, Activation);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
