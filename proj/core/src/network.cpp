#include "capsroute/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "capsroute/rng.hpp"

namespace capsroute {

// ---------------------------------------------------------------------------
// configuration

std::size_t NetworkConfig::conv1_extent() const {
  return conv_output_extent(input_hw, conv1_kernel, 1);
}

std::size_t NetworkConfig::grid_extent() const {
  return conv_output_extent(conv1_extent(), primarycaps_kernel, primarycaps_stride);
}

std::size_t NetworkConfig::num_child_capsules() const {
  const std::size_t g = grid_extent();
  return g * g * capsule_types();
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("network." + field + ": " + why);
  };
  if (input_hw == 0) fail("input_hw", "must be positive");
  if (input_channels == 0) fail("input_channels", "must be positive");
  if (scale_factor == 0) fail("scale_factor", "must be positive");
  if (conv1_filters % scale_factor != 0 || conv1_width() == 0) {
    fail("conv1_filters", "must be a positive multiple of scale_factor");
  }
  if (primarycaps_filters % scale_factor != 0 || primarycaps_width() == 0) {
    fail("primarycaps_filters", "must be a positive multiple of scale_factor");
  }
  if (capsule_dim_child == 0 || primarycaps_width() % capsule_dim_child != 0) {
    fail("primarycaps_filters", "width must be divisible by capsule_dim_child");
  }
  if (capsule_dim_parent == 0) fail("capsule_dim_parent", "must be positive");
  if (num_classes < 1) fail("num_classes", "must be positive");
  if (conv1_kernel % 2 == 0) fail("conv1_kernel", "must be odd");
  if (primarycaps_kernel % 2 == 0) fail("primarycaps_kernel", "must be odd");
  if (primarycaps_stride != 1 && primarycaps_stride != 2) fail("primarycaps_stride", "must be 1 or 2");
  if (input_hw < conv1_kernel) fail("input_hw", "smaller than conv1 kernel");
  if (input_hw - conv1_kernel + 1 < primarycaps_kernel) fail("primarycaps_kernel", "larger than conv1 output");
  if (decoder_hidden1 == 0 || decoder_hidden2 == 0) fail("decoder_hidden", "must be positive");
  if (!(init_stddev > 0.0)) fail("init_stddev", "must be positive");
  if (!(transform_init_stddev > 0.0)) fail("transform_init_stddev", "must be positive");
  if (routing.iterations < 1) fail("routing.iterations", "must be >= 1");
  routing.norm.validate();
}

void MarginLossParams::validate() const {
  if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0)) {
    throw std::invalid_argument("margin: require 0 < m_minus < m_plus < 1");
  }
  if (!(lambda_down >= 0.0)) throw std::invalid_argument("margin: lambda_down must be >= 0");
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Tensor<T> class_probabilities(const Tensor<T>& digitcaps) {
  if (digitcaps.rank() != 3) throw DimensionError("digitcaps must be [B x J x D]");
  const std::size_t B = digitcaps.dim(0), J = digitcaps.dim(1), D = digitcaps.dim(2);
  Tensor<T> probs({B, J});
  for (std::size_t r = 0; r < B * J; ++r) {
    T sq = T(0);
    for (std::size_t d = 0; d < D; ++d) sq += digitcaps[r * D + d] * digitcaps[r * D + d];
    probs[r] = std::sqrt(sq);
  }
  return probs;
}

template <typename T>
std::vector<int> predict_classes(const Tensor<T>& probabilities) {
  const std::size_t B = probabilities.dim(0), J = probabilities.dim(1);
  std::vector<int> out(B);
  for (std::size_t n = 0; n < B; ++n) {
    const T* row = probabilities.raw() + n * J;
    out[n] = static_cast<int>(std::max_element(row, row + J) - row);
  }
  return out;
}

namespace {

template <typename T>
void check_labels(const Tensor<T>& probabilities, std::span<const int> labels) {
  if (probabilities.rank() != 2 || labels.size() != probabilities.dim(0)) {
    throw DimensionError("labels do not match probability batch");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= probabilities.dim(1)) {
      throw std::out_of_range("label " + std::to_string(l) + " outside class range");
    }
  }
}

}  // namespace

template <typename T>
double margin_loss(const Tensor<T>& probabilities, std::span<const int> labels, const MarginLossParams& params) {
  check_labels(probabilities, labels);
  const std::size_t B = probabilities.dim(0), J = probabilities.dim(1);
  double total = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t k = 0; k < J; ++k) {
      const double p = probabilities[n * J + k];
      if (static_cast<int>(k) == labels[n]) {
        const double gap = std::max(0.0, params.m_plus - p);
        total += gap * gap;
      } else {
        const double gap = std::max(0.0, p - params.m_minus);
        total += params.lambda_down * gap * gap;
      }
    }
  }
  return total / static_cast<double>(B);
}

template <typename T>
Tensor<T> margin_loss_grad(const Tensor<T>& probabilities, std::span<const int> labels,
                           const MarginLossParams& params) {
  check_labels(probabilities, labels);
  const std::size_t B = probabilities.dim(0), J = probabilities.dim(1);
  const double inv_b = 1.0 / static_cast<double>(B);
  Tensor<T> grad(probabilities.shape());
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t k = 0; k < J; ++k) {
      const double p = probabilities[n * J + k];
      double g;
      if (static_cast<int>(k) == labels[n]) {
        g = -2.0 * std::max(0.0, params.m_plus - p);
      } else {
        g = 2.0 * params.lambda_down * std::max(0.0, p - params.m_minus);
      }
      grad[n * J + k] = static_cast<T>(g * inv_b);
    }
  }
  return grad;
}

template <typename T>
double reconstruction_sse(const Tensor<T>& reconstruction, const Tensor<T>& images) {
  if (reconstruction.size() != images.size() || reconstruction.rank() == 0) {
    throw DimensionError("reconstruction/image size mismatch");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const double e = static_cast<double>(reconstruction[k]) - static_cast<double>(images[k]);
    total += e * e;
  }
  return total / static_cast<double>(reconstruction.dim(0));
}

double total_loss(double margin, double reconstruction_sse, double weight) {
  return margin + weight * reconstruction_sse;
}

template <typename T>
Tensor<T> mask_digitcaps(const Tensor<T>& digitcaps, std::span<const int> keep) {
  if (digitcaps.rank() != 3 || keep.size() != digitcaps.dim(0)) {
    throw DimensionError("mask_digitcaps: expected [B x J x D] and B row indices");
  }
  const std::size_t B = digitcaps.dim(0), J = digitcaps.dim(1), D = digitcaps.dim(2);
  Tensor<T> masked({B, J * D});
  for (std::size_t n = 0; n < B; ++n) {
    if (keep[n] < 0 || static_cast<std::size_t>(keep[n]) >= J) throw std::out_of_range("mask row out of range");
    const std::size_t row = static_cast<std::size_t>(keep[n]);
    std::copy_n(digitcaps.raw() + (n * J + row) * D, D, masked.raw() + n * J * D + row * D);
  }
  return masked;
}

template <typename T>
DecoderPass<T> masked_reconstruction(const Tensor<T>& digitcaps, std::span<const int> keep,
                                     const Decoder<T>& decoder) {
  DecoderPass<T> pass;
  pass.masked = mask_digitcaps(digitcaps, keep);
  pass.keep.assign(keep.begin(), keep.end());
  pass.hidden1 = dense_forward(pass.masked, decoder.fc1);
  pass.hidden2 = dense_forward(pass.hidden1, decoder.fc2);
  pass.output = dense_forward(pass.hidden2, decoder.fc3);
  return pass;
}

template <typename T>
DecoderGrads<T> masked_reconstruction_backward(const Tensor<T>& grad_output, const DecoderPass<T>& pass,
                                               const Decoder<T>& decoder, std::size_t parents,
                                               std::size_t depth) {
  DecoderGrads<T> g;
  g.fc3 = dense_backward(grad_output, pass.hidden2, pass.output, decoder.fc3);
  g.fc2 = dense_backward(g.fc3.input, pass.hidden1, pass.hidden2, decoder.fc2);
  g.fc1 = dense_backward(g.fc2.input, pass.masked, pass.hidden1, decoder.fc1);
  const std::size_t B = pass.masked.dim(0);
  g.digitcaps = Tensor<T>({B, parents, depth});
  for (std::size_t n = 0; n < B; ++n) {
    const std::size_t offset = n * parents * depth + static_cast<std::size_t>(pass.keep[n]) * depth;
    std::copy_n(g.fc1.input.raw() + offset, depth, g.digitcaps.raw() + offset);
  }
  return g;
}

// ---------------------------------------------------------------------------
// CapsNet

template <typename T>
CapsNet<T>::CapsNet(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const double sd = config_.init_stddev;
  conv1_ = make_conv_layer<T>(config_.conv1_width(), config_.input_channels, config_.conv1_kernel, 1,
                              Activation::Relu, sd, rng);
  primary_ = make_conv_layer<T>(config_.primarycaps_width(), config_.conv1_width(), config_.primarycaps_kernel,
                                config_.primarycaps_stride, Activation::Relu, sd, rng);
  transforms_ = Tensor<T>({config_.num_child_capsules(), config_.num_classes, config_.capsule_dim_parent,
                           config_.capsule_dim_child});
  for (auto& w : transforms_.data()) w = static_cast<T>(rng.truncated_normal(config_.transform_init_stddev));

  const std::size_t caps_out = config_.num_classes * config_.capsule_dim_parent;
  auto glorot = [](std::size_t in, std::size_t out) { return std::sqrt(2.0 / static_cast<double>(in + out)); };
  decoder_.fc1 = make_dense_layer<T>(config_.decoder_hidden1, caps_out, Activation::Relu,
                                     glorot(caps_out, config_.decoder_hidden1), rng);
  decoder_.fc2 = make_dense_layer<T>(config_.decoder_hidden2, config_.decoder_hidden1, Activation::Relu,
                                     glorot(config_.decoder_hidden1, config_.decoder_hidden2), rng);
  decoder_.fc3 = make_dense_layer<T>(config_.image_pixels(), config_.decoder_hidden2, Activation::Sigmoid,
                                     glorot(config_.decoder_hidden2, config_.image_pixels()), rng);
}

template <typename T>
void CapsNet<T>::set_routing(const RoutingOptions& routing) {
  NetworkConfig next = config_;
  next.routing = routing;
  next.validate();
  config_ = next;
}

template <typename T>
std::vector<ParamRef<T>> CapsNet<T>::parameters() {
  return {{"conv1.kernels", &conv1_.kernels},     {"conv1.bias", &conv1_.bias},
          {"primarycaps.kernels", &primary_.kernels}, {"primarycaps.bias", &primary_.bias},
          {"digitcaps.transforms", &transforms_},  {"decoder.fc1.weights", &decoder_.fc1.weights},
          {"decoder.fc1.bias", &decoder_.fc1.bias}, {"decoder.fc2.weights", &decoder_.fc2.weights},
          {"decoder.fc2.bias", &decoder_.fc2.bias}, {"decoder.fc3.weights", &decoder_.fc3.weights},
          {"decoder.fc3.bias", &decoder_.fc3.bias}};
}

template <typename T>
std::vector<const Tensor<T>*> CapsNet<T>::parameters() const {
  auto refs = const_cast<CapsNet*>(this)->parameters();
  std::vector<const Tensor<T>*> out;
  for (auto& r : refs) out.push_back(r.value);
  return out;
}

template <typename T>
std::vector<std::string> CapsNet<T>::parameter_names() const {
  auto refs = const_cast<CapsNet*>(this)->parameters();
  std::vector<std::string> out;
  for (auto& r : refs) out.push_back(r.name);
  return out;
}

template <typename T>
std::size_t CapsNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename T>
ForwardPass<T> CapsNet<T>::forward(const Tensor<T>& images, const ForwardOptions<T>& options) const {
  const auto& cfg = config_;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels || images.dim(2) != cfg.input_hw ||
      images.dim(3) != cfg.input_hw) {
    throw DimensionError("forward: images " + shape_string(images.shape()) + " do not match network input");
  }
  const std::size_t B = images.dim(0);
  const std::size_t G = cfg.grid_extent();
  const std::size_t cells = G * G;
  const std::size_t I = cfg.num_child_capsules();
  const std::size_t J = cfg.num_classes;
  const std::size_t Dc = cfg.capsule_dim_child;
  const std::size_t Dp = cfg.capsule_dim_parent;

  ForwardPass<T> pass;
  pass.conv1 = conv2d_forward(images, conv1_);
  pass.primary = conv2d_forward(pass.conv1, primary_);

  // Channels t*Dc .. t*Dc+Dc-1 at one grid cell form child capsule t*G*G + cell.
  pass.child_pre = Tensor<T>({B, I, Dc});
  const std::size_t types = cfg.capsule_types();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t t = 0; t < types; ++t) {
      for (std::size_t k = 0; k < Dc; ++k) {
        const T* src = pass.primary.raw() + (n * types * Dc + t * Dc + k) * cells;
        for (std::size_t cell = 0; cell < cells; ++cell) {
          pass.child_pre[(n * I + t * cells + cell) * Dc + k] = src[cell];
        }
      }
    }
  }
  pass.child = squash(pass.child_pre);

  Tensor<T> u_hat({B, I, J, Dp});
  const std::size_t rows = J * Dp;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t i = 0; i < I; ++i) {
      const T* u = pass.child.raw() + (n * I + i) * Dc;
      const T* w = transforms_.raw() + i * rows * Dc;
      T* out = u_hat.raw() + (n * I + i) * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (std::size_t k = 0; k < Dc; ++k) acc += w[r * Dc + k] * u[k];
        out[r] = acc;
      }
    }
  }

  if (options.fixed_coefficients != nullptr) {
    pass.routing.state = route_with_coefficients(std::move(u_hat), *options.fixed_coefficients);
  } else {
    RoutingOptions ro = cfg.routing;
    ro.capture_trace = options.capture_trace;
    pass.routing = route(std::move(u_hat), ro);
  }
  pass.probabilities = class_probabilities(pass.routing.state.v);

  if (!options.mask_labels.empty()) {
    if (options.mask_labels.size() != B) throw DimensionError("forward: mask_labels size != batch");
    pass.mask.assign(options.mask_labels.begin(), options.mask_labels.end());
  } else {
    pass.mask = predict_classes(pass.probabilities);
  }
  if (options.decode) pass.decoder = masked_reconstruction(pass.routing.state.v, pass.mask, decoder_);
  return pass;
}

template <typename T>
LossBreakdown CapsNet<T>::loss(const ForwardPass<T>& pass, const Tensor<T>& images, std::span<const int> labels,
                               const LossConfig& config) const {
  LossBreakdown out;
  out.margin = margin_loss(pass.probabilities, labels, config.margin);
  if (!pass.decoder.output.empty()) out.reconstruction_sse = reconstruction_sse(pass.decoder.output, images);
  out.total = total_loss(out.margin, out.reconstruction_sse, config.reconstruction_weight);
  return out;
}

template <typename T>
std::vector<Tensor<T>> CapsNet<T>::backward(const ForwardPass<T>& pass, const Tensor<T>& images,
                                            std::span<const int> labels, const LossConfig& config) const {
  const auto& cfg = config_;
  if (pass.decoder.output.empty()) throw std::logic_error("backward needs a forward pass with decode = true");
  if (!std::equal(labels.begin(), labels.end(), pass.mask.begin(), pass.mask.end())) {
    throw std::logic_error("backward: decoder mask must follow the training labels");
  }
  const auto& state = pass.routing.state;
  const std::size_t B = images.dim(0);
  const std::size_t G = cfg.grid_extent();
  const std::size_t cells = G * G;
  const std::size_t I = cfg.num_child_capsules();
  const std::size_t J = cfg.num_classes;
  const std::size_t Dc = cfg.capsule_dim_child;
  const std::size_t Dp = cfg.capsule_dim_parent;

  // Margin loss through the capsule lengths.
  const Tensor<T> grad_p = margin_loss_grad(pass.probabilities, labels, config.margin);
  Tensor<T> grad_v({B, J, Dp});
  for (std::size_t r = 0; r < B * J; ++r) {
    const T len = pass.probabilities[r];
    if (len > T(0)) {
      const T scale_r = grad_p[r] / len;
      for (std::size_t d = 0; d < Dp; ++d) grad_v[r * Dp + d] = scale_r * state.v[r * Dp + d];
    }
  }

  // Reconstruction loss through the masked decoder.
  Tensor<T> grad_recon(pass.decoder.output.shape());
  const T recon_scale = static_cast<T>(2.0 * config.reconstruction_weight / static_cast<double>(B));
  for (std::size_t k = 0; k < grad_recon.size(); ++k) {
    grad_recon[k] = recon_scale * (pass.decoder.output[k] - images[k]);
  }
  auto dec = masked_reconstruction_backward(grad_recon, pass.decoder, decoder_, J, Dp);
  for (std::size_t k = 0; k < grad_v.size(); ++k) grad_v[k] += dec.digitcaps[k];

  const Tensor<T> grad_u_hat = routing_backward(grad_v, state);

  // u_hat_{j|i} = W_ij u_i
  Tensor<T> grad_transforms(transforms_.shape());
  Tensor<T> grad_child({B, I, Dc});
  const std::size_t rows = J * Dp;
  for (std::size_t i = 0; i < I; ++i) {
    const T* w = transforms_.raw() + i * rows * Dc;
    T* gw = grad_transforms.raw() + i * rows * Dc;
    for (std::size_t n = 0; n < B; ++n) {
      const T* u = pass.child.raw() + (n * I + i) * Dc;
      const T* g = grad_u_hat.raw() + (n * I + i) * rows;
      T* gu = grad_child.raw() + (n * I + i) * Dc;
      for (std::size_t r = 0; r < rows; ++r) {
        const T gr = g[r];
        for (std::size_t k = 0; k < Dc; ++k) {
          gw[r * Dc + k] += gr * u[k];
          gu[k] += w[r * Dc + k] * gr;
        }
      }
    }
  }

  const Tensor<T> grad_child_pre = squash_backward(pass.child_pre, grad_child);
  Tensor<T> grad_primary(pass.primary.shape());
  const std::size_t types = cfg.capsule_types();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t t = 0; t < types; ++t) {
      for (std::size_t k = 0; k < Dc; ++k) {
        T* dst = grad_primary.raw() + (n * types * Dc + t * Dc + k) * cells;
        for (std::size_t cell = 0; cell < cells; ++cell) {
          dst[cell] = grad_child_pre[(n * I + t * cells + cell) * Dc + k];
        }
      }
    }
  }

  auto gprim = conv2d_backward(grad_primary, pass.conv1, pass.primary, primary_, true);
  auto gconv1 = conv2d_backward(gprim.input, images, pass.conv1, conv1_, false);

  std::vector<Tensor<T>> grads;
  grads.reserve(11);
  grads.push_back(std::move(gconv1.kernels));
  grads.push_back(std::move(gconv1.bias));
  grads.push_back(std::move(gprim.kernels));
  grads.push_back(std::move(gprim.bias));
  grads.push_back(std::move(grad_transforms));
  grads.push_back(std::move(dec.fc1.weights));
  grads.push_back(std::move(dec.fc1.bias));
  grads.push_back(std::move(dec.fc2.weights));
  grads.push_back(std::move(dec.fc2.bias));
  grads.push_back(std::move(dec.fc3.weights));
  grads.push_back(std::move(dec.fc3.bias));
  return grads;
}

#define CAPSROUTE_INSTANTIATE(T)                                                                          \
  template Tensor<T> class_probabilities(const Tensor<T>&);                                               \
  template std::vector<int> predict_classes(const Tensor<T>&);                                            \
  template double margin_loss(const Tensor<T>&, std::span<const int>, const MarginLossParams&);           \
  template Tensor<T> margin_loss_grad(const Tensor<T>&, std::span<const int>, const MarginLossParams&);    \
  template double reconstruction_sse(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mask_digitcaps(const Tensor<T>&, std::span<const int>);                              \
  template DecoderPass<T> masked_reconstruction(const Tensor<T>&, std::span<const int>, const Decoder<T>&); \
  template DecoderGrads<T> masked_reconstruction_backward(const Tensor<T>&, const DecoderPass<T>&,        \
                                                          const Decoder<T>&, std::size_t, std::size_t);   \
  template class CapsNet<T>;

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
