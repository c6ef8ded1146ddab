#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsroute/config.hpp"
#include "capsroute/dataset.hpp"
#include "capsroute/routing.hpp"
#include "capsroute/training.hpp"

namespace capsroute {

class TraceNotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// routing traces on disk

/// Checkpoint-format directory with tensors logits.<t> and coefficients.<t>
/// ([B x I x J] each). `meta` conventionally carries "labels" and "indices".
template <typename T>
void save_trace(const std::filesystem::path& dir, const RoutingTrace<T>& trace, const nlohmann::json& meta);

template <typename T>
struct StoredTrace {
  RoutingTrace<T> trace;
  nlohmann::json meta;
  std::vector<int> labels;  // from meta, empty if absent
};

template <typename T>
StoredTrace<T> load_trace(const std::filesystem::path& dir);

/// Columns: iteration, lower_index, parent_index, logit, coefficient; one
/// batch element.
template <typename T>
void write_trace_csv(const std::filesystem::path& path, const RoutingTrace<T>& trace, std::size_t sample);

/// Reads write_trace_csv output back into a single-sample trace.
RoutingTrace<double> read_trace_csv(const std::filesystem::path& path);

/// Runs the first `count` samples of `ds` through the network (no decoder) and
/// returns the routing trace concatenated over the batch axis.
template <typename T>
RoutingTrace<T> capture_trace(const CapsNet<T>& net, const Dataset& ds, std::size_t count,
                              std::size_t batch_size = 100);

/// Final-iteration statistics over every (sample, lower capsule) row.
struct CoefficientSummary {
  std::size_t rows = 0;
  double gt_mean = 0.0;
  double gt_fraction_in_band = 0.0;  // ground-truth coefficients inside [band_lo, band_hi]
  double gt_fraction_above = 0.0;    // ground-truth coefficients above `high`
  std::size_t nondegenerate_rows = 0;  // rows whose logits are not all equal
  std::size_t unit_range_rows = 0;     // of those, rows with max(c) - min(c) == 1 exactly
};

template <typename T>
CoefficientSummary summarize_coefficients(const RoutingTrace<T>& trace, std::span<const int> labels,
                                          double band_lo = 0.08, double band_hi = 0.12, double high = 0.9);

nlohmann::json to_json(const CoefficientSummary& summary);

// ---------------------------------------------------------------------------
// histograms

enum class HistogramMode { GroundTruth, All };
enum class TraceQuantity { Coefficients, Logits };

struct Histogram {
  std::vector<std::size_t> counts;
  std::size_t total() const;
};

/// One histogram per iteration over shared bin edges. Edges span the observed
/// range of the first iteration and stay fixed; values outside land in the
/// edge bins. A zero-width range is widened to +/- 0.5.
struct HistogramTable {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t bins = 0;
  std::vector<Histogram> iterations;

  double bin_left(std::size_t bin) const;
  double bin_right(std::size_t bin) const;
  std::size_t bin_of(double value) const;
};

/// GroundTruth keeps only the column of each sample's label (`labels` sized
/// to the batch); All uses every coefficient.
template <typename T>
HistogramTable coefficient_histograms(const RoutingTrace<T>& trace, std::span<const int> labels,
                                      HistogramMode mode = HistogramMode::GroundTruth, std::size_t bins = 100,
                                      TraceQuantity quantity = TraceQuantity::Coefficients);

/// Columns: iteration, bin_left, bin_right, count.
void write_histogram_csv(const std::filesystem::path& path, const HistogramTable& table);

// ---------------------------------------------------------------------------
// per-capsule rows

struct RowValue {
  std::size_t sample = 0;
  std::size_t lower = 0;
  std::size_t parent = 0;
  double logit = 0.0;
  double coefficient = 0.0;
};

/// Final-iteration logits and coefficients for the given lower capsules of one
/// batch element: |lower_indices| * J rows, parents in ascending order.
template <typename T>
std::vector<RowValue> capsule_row_extract(const RoutingTrace<T>& trace, std::span<const std::size_t> lower_indices,
                                          std::size_t sample = 0);

void write_rows_csv(const std::filesystem::path& path, std::span<const RowValue> rows);

// ---------------------------------------------------------------------------
// output probabilities and tuning curves

/// matrix(g, j): mean probability of output capsule j over samples of class g.
struct TuningCurve {
  std::size_t classes = 0;
  std::vector<double> matrix;
  std::vector<std::size_t> class_counts;

  double at(std::size_t truth, std::size_t capsule) const { return matrix[truth * classes + capsule]; }
};

/// `probabilities` is [N x classes] row-major.
TuningCurve tuning_curves(std::span<const double> probabilities, std::span<const int> labels, std::size_t classes);

template <typename T>
TuningCurve tuning_curves(const CapsNet<T>& net, const Dataset& ds, std::size_t batch_size = 500);

/// Rows: truth class, then one column per output capsule.
void write_tuning_csv(const std::filesystem::path& path, const TuningCurve& curve);

/// Columns: index, label, prediction, p0 .. p{J-1}.
void write_probabilities_csv(const std::filesystem::path& path, const Evaluation& eval, std::span<const int> labels);

// ---------------------------------------------------------------------------
// routing-iteration sweeps

struct SweepRow {
  int iterations = 0;
  double final_test_acc = 0.0;
  double best_test_acc = 0.0;
  double final_train_acc = 0.0;
  double gap = 0.0;  // final train accuracy minus final test accuracy
  std::filesystem::path run_dir;
};

/// One training run per entry of `r_values`, each under out_dir/<run id>.
template <typename T>
std::vector<SweepRow> iteration_sweep(const RunConfig& base, std::span<const int> r_values, const Dataset& train_set,
                                      const Dataset& test_set, const std::filesystem::path& out_dir);

/// Columns: iterations, final_test_acc, best_test_acc, final_train_acc, gap, run_dir.
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

// ---------------------------------------------------------------------------
// ensembles

struct EnsemblePrediction {
  std::vector<int> votes;                  // one per model
  std::vector<std::vector<double>> probs;  // one probability row per model
  int label = 0;
  int agreement = 0;  // number of models voting for `label`
};

/// A label with at least two of three votes wins. A three-way split goes to
/// the label with the highest probability summed over models (lowest label on
/// exact ties).
int vote_label(std::span<const int> votes, std::span<const double> summed_probabilities);

struct VoteResult {
  std::vector<EnsemblePrediction> predictions;
  std::size_t errors = 0;
  double error_rate = 0.0;
};

/// Needs exactly three evaluations carrying probabilities over the same set.
VoteResult majority_vote(std::span<const Evaluation> models, std::span<const int> labels);

// ---------------------------------------------------------------------------
// misclassification galleries

struct GalleryEntry {
  std::size_t index = 0;
  int predicted = 0;
  int truth = 0;
};

/// Misclassified samples in ascending index order.
std::vector<GalleryEntry> misclassifications(std::span<const int> predictions, std::span<const int> labels);

/// Writes <stem>.csv (index, prediction, ground_truth) and, for a non-empty
/// gallery, <stem>.png with the images tiled `columns` wide.
std::vector<std::filesystem::path> write_gallery(const std::filesystem::path& stem,
                                                 std::span<const GalleryEntry> entries, const Dataset& ds,
                                                 std::size_t columns = 10);

/// 8-bit grayscale PNG through libpng.
void write_png_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                    std::span<const std::uint8_t> pixels);

}  // namespace capsroute
