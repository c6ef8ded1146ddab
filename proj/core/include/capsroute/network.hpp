#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capsroute/layers.hpp"
#include "capsroute/routing.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// Architecture of the three-layer capsule network: Conv1 -> PrimaryCaps ->
/// routing -> DigitCaps, plus the reconstruction decoder.
struct NetworkConfig {
  std::size_t input_hw = 28;
  std::size_t input_channels = 1;
  std::size_t conv1_filters = 256;
  std::size_t conv1_kernel = 9;
  std::size_t primarycaps_filters = 256;
  std::size_t primarycaps_kernel = 9;
  std::size_t primarycaps_stride = 2;
  std::size_t capsule_dim_child = 8;
  std::size_t capsule_dim_parent = 16;
  std::size_t num_classes = 10;
  std::size_t decoder_hidden1 = 512;
  std::size_t decoder_hidden2 = 1024;
  /// Uniform divisor on both conv widths for desk-scale runs. Routing is untouched.
  std::size_t scale_factor = 1;
  /// Stddev of the truncated-normal init for the conv kernels. Biases start at zero.
  double init_stddev = 0.1;
  /// Same for the DigitCaps transformation matrices.
  double transform_init_stddev = 0.1;
  RoutingOptions routing{};

  std::size_t conv1_width() const { return conv1_filters / scale_factor; }
  std::size_t primarycaps_width() const { return primarycaps_filters / scale_factor; }
  std::size_t capsule_types() const { return primarycaps_width() / capsule_dim_child; }
  std::size_t conv1_extent() const;
  std::size_t grid_extent() const;
  /// grid^2 * (primarycaps width / child dim); 1152 for the full MNIST network.
  std::size_t num_child_capsules() const;
  std::size_t image_pixels() const { return input_channels * input_hw * input_hw; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct MarginLossParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_down = 0.5;
  /// Requires 0 < m_minus < m_plus < 1.
  void validate() const;
};

struct LossConfig {
  MarginLossParams margin{};
  /// Multiplies the per-sample sum of squared reconstruction errors.
  double reconstruction_weight = 0.0005;
};

/// Euclidean norm of each parent capsule: [B x J x D] -> [B x J].
template <typename T>
Tensor<T> class_probabilities(const Tensor<T>& digitcaps);

/// Index of the longest capsule per sample (lowest index on ties).
template <typename T>
std::vector<int> predict_classes(const Tensor<T>& probabilities);

/// sum_k T_k max(0, m+ - p_k)^2 + lambda (1 - T_k) max(0, p_k - m-)^2, summed
/// over classes and averaged over the batch.
template <typename T>
double margin_loss(const Tensor<T>& probabilities, std::span<const int> labels, const MarginLossParams& params);

template <typename T>
Tensor<T> margin_loss_grad(const Tensor<T>& probabilities, std::span<const int> labels,
                           const MarginLossParams& params);

/// Sum of squared errors per sample, averaged over the batch.
template <typename T>
double reconstruction_sse(const Tensor<T>& reconstruction, const Tensor<T>& images);

double total_loss(double margin, double reconstruction_sse, double weight);

/// Zeroes every parent row except the one selected per sample; output is the
/// flattened [B x (J*D)] decoder input.
template <typename T>
Tensor<T> mask_digitcaps(const Tensor<T>& digitcaps, std::span<const int> keep);

template <typename T>
struct Decoder {
  DenseLayer<T> fc1;  // relu
  DenseLayer<T> fc2;  // relu
  DenseLayer<T> fc3;  // sigmoid
};

template <typename T>
struct DecoderPass {
  std::vector<int> keep;
  Tensor<T> masked;
  Tensor<T> hidden1;
  Tensor<T> hidden2;
  Tensor<T> output;  // [B x pixels], in (0, 1)
};

/// Masks `digitcaps` to the rows in `keep` and runs the decoder.
template <typename T>
DecoderPass<T> masked_reconstruction(const Tensor<T>& digitcaps, std::span<const int> keep,
                                     const Decoder<T>& decoder);

/// Gradient of the decoder input rows back into [B x J x D]; rows outside
/// `keep` receive exactly zero.
template <typename T>
struct DecoderGrads {
  Tensor<T> digitcaps;
  DenseGrads<T> fc1, fc2, fc3;
};

template <typename T>
DecoderGrads<T> masked_reconstruction_backward(const Tensor<T>& grad_output, const DecoderPass<T>& pass,
                                               const Decoder<T>& decoder, std::size_t parents,
                                               std::size_t depth);

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
};

template <typename T>
struct ForwardOptions {
  /// Parent row fed to the decoder per sample. Empty: the predicted class.
  std::span<const int> mask_labels{};
  bool decode = true;
  bool capture_trace = false;
  /// Replaces the routing loop with one weighted sum over these coefficients.
  /// Used to finite-difference the network with coefficients held fixed.
  const Tensor<T>* fixed_coefficients = nullptr;
};

template <typename T>
struct ForwardPass {
  Tensor<T> conv1;        // [B x F1 x H1 x H1]
  Tensor<T> primary;      // [B x F2 x G x G]
  Tensor<T> child_pre;    // [B x I x Dc] capsules before squash
  Tensor<T> child;        // [B x I x Dc]
  RoutingResult<T> routing;
  Tensor<T> probabilities;  // [B x J]
  std::vector<int> mask;    // decoded row per sample
  DecoderPass<T> decoder;   // empty unless decode

  const Tensor<T>& digitcaps() const { return routing.state.v; }
};

struct LossBreakdown {
  double margin = 0.0;
  double reconstruction_sse = 0.0;
  double total = 0.0;
};

template <typename T>
class CapsNet {
 public:
  /// Fresh truncated-normal initialization from `seed`.
  CapsNet(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  void set_routing(const RoutingOptions& routing);

  /// Fixed order; names are stable checkpoint keys.
  std::vector<ParamRef<T>> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  /// images: [B x C x H x W] with pixels in [0, 1].
  ForwardPass<T> forward(const Tensor<T>& images, const ForwardOptions<T>& options = {}) const;

  LossBreakdown loss(const ForwardPass<T>& pass, const Tensor<T>& images, std::span<const int> labels,
                     const LossConfig& config) const;

  /// Gradients of loss() for every parameter, in parameters() order. `pass`
  /// must come from forward() with decode = true and mask_labels = labels.
  std::vector<Tensor<T>> backward(const ForwardPass<T>& pass, const Tensor<T>& images, std::span<const int> labels,
                                  const LossConfig& config) const;

  const ConvLayer<T>& conv1() const { return conv1_; }
  const ConvLayer<T>& primarycaps() const { return primary_; }
  /// [I x J x Dp x Dc]; u_hat_{j|i} = W_ij u_i.
  const Tensor<T>& transforms() const { return transforms_; }
  const Decoder<T>& decoder() const { return decoder_; }

 private:
  NetworkConfig config_;
  ConvLayer<T> conv1_;
  ConvLayer<T> primary_;
  Tensor<T> transforms_;
  Decoder<T> decoder_;
};

}  // namespace capsroute
