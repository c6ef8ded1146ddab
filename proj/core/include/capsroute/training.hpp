#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsroute/config.hpp"
#include "capsroute/dataset.hpp"
#include "capsroute/network.hpp"
#include "capsroute/rng.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

#ifdef CAPSROUTE_F64
using Real = double;
#else
using Real = float;
#endif

// ---------------------------------------------------------------------------
// optimizer

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moments, one pair per parameter tensor. Empty until the
/// first step, which sizes them from the parameters.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One Adam update at step t (1-based) with bias correction:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,
///   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state,
               std::int64_t t, double lr, const AdamParams& hyper = {});

/// base_lr * decay_rate^(step / decay_step), step counted from 0.
double learning_rate(const TrainConfig& cfg, std::int64_t step);

// ---------------------------------------------------------------------------
// augmentation

/// Shifts by (dx, dy) pixels and rotates by `degrees` about the image centre,
/// sampling the source with cubic convolution and zero fill; output clipped to [0, 1].
/// Positive dx moves content right, positive dy moves it down.
void augment_with(std::span<const float> image, std::span<float> out, std::size_t height, std::size_t width, int dx,
                  int dy, double degrees);

/// Draws a shift in [-2, 2]^2 and, for Shift2Rot20, an angle in [-20, 20].
void augment(std::span<const float> image, std::span<float> out, std::size_t height, std::size_t width,
             Augmentation mode, Rng& rng);

// ---------------------------------------------------------------------------
// evaluation and checkpoints

struct Evaluation {
  double accuracy = 0.0;
  std::vector<int> predictions;
  /// Class probabilities [N x J], row-major. Empty unless requested.
  std::vector<double> probabilities;
  std::size_t num_classes = 0;
};

template <typename T>
Evaluation evaluate(const CapsNet<T>& net, const Dataset& ds, std::size_t batch_size = 500,
                    bool keep_probabilities = false);

/// Writes every parameter plus `meta` (the run config goes under "config").
template <typename T>
void save_network(const CapsNet<T>& net, const std::filesystem::path& dir, const RunConfig& config,
                  nlohmann::json meta = nlohmann::json::object());

template <typename T>
struct LoadedNetwork {
  RunConfig config;
  CapsNet<T> net;
  nlohmann::json meta;
};

/// Rebuilds the network from the stored config and copies the tensors in.
/// Missing or misshapen tensors raise FormatError.
template <typename T>
LoadedNetwork<T> load_network(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// training loop

/// Raised when a step produces a non-finite loss. `dump_dir` holds the
/// diagnostic files for the offending batch.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path dump_dir)
      : std::runtime_error(what), dump_dir_(std::move(dump_dir)) {}
  const std::filesystem::path& dump_dir() const { return dump_dir_; }

 private:
  std::filesystem::path dump_dir_;
};

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  LossBreakdown loss;
  double batch_accuracy = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double margin_loss = 0.0;
  double recon_loss = 0.0;  // weighted reconstruction term
  double train_acc = 0.0;   // running accuracy over the epoch's batches
  double test_acc = 0.0;    // NaN when not evaluated
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  double best_test_acc = 0.0;
  std::size_t best_epoch = 0;
  std::filesystem::path metrics_csv;
  std::filesystem::path steps_csv;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;  // empty when nothing was evaluated
  std::vector<std::filesystem::path> artifacts;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs the epoch loop and writes metrics.csv, steps.csv and checkpoints/
/// {final,best} under `out_dir`. Everything is a function of (config, data).
template <typename T>
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

/// Loads the configured train and test splits (with subsets applied) from
/// `dir`, falling back to config.data.dir.
std::pair<Dataset, Dataset> load_run_data(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace capsroute
