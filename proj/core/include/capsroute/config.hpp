#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsroute/network.hpp"

namespace capsroute {

/// Raised for malformed or out-of-range run configuration. The message starts
/// with the dotted field name.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Augmentation { None, Shift2, Shift2Rot20 };

std::string_view to_string(Augmentation mode);
/// "none", "shift2", "shift2+rot20".
Augmentation parse_augmentation(std::string_view name);

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  double base_lr = 0.001;
  double lr_decay_rate = 0.96;
  double decay_step = 2000.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  Augmentation augmentation = Augmentation::None;
  std::uint64_t seed = 1;
  /// Stop after this many optimizer steps (0: no limit). Epoch metrics are
  /// still written for the partial epoch.
  std::size_t max_steps = 0;
  std::size_t eval_batch_size = 500;
  /// Evaluate on the test split after every epoch (otherwise only the last).
  bool eval_every_epoch = true;

  void validate() const;
};

struct DataConfig {
  std::string dir;  // empty: CLI flag, then CAPSROUTE_DATA_DIR
  std::string name = "mnist";
  std::size_t train_subset = 0;  // 0: full split
  std::size_t test_subset = 0;
  std::uint64_t subset_seed = 0;

  void validate() const;
};

struct RunConfig {
  NetworkConfig network;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;

  void validate() const;
  /// "<dataset>_<norm>_r<iterations>_s<seed>"
  std::string run_id() const;
};

/// Reduced widths and a 10k stratified training subset: 64/64 conv filters,
/// 288 child capsules, batch 128, 3 routing iterations, 5 epochs, transform
/// init stddev 0.01.
RunConfig desk_scale_config();

nlohmann::json to_json(const Normalization& norm);
nlohmann::json to_json(const NetworkConfig& cfg);
nlohmann::json to_json(const LossConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const DataConfig& cfg);
/// Sections: network, routing, loss, train, data.
nlohmann::json to_json(const RunConfig& cfg);

/// Fields absent from `j` keep the values already in the target. Unknown keys
/// and wrongly typed values raise ConfigError.
void update_from_json(RunConfig& cfg, const nlohmann::json& j);

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});

/// Reads a JSON run config; a missing file raises std::runtime_error.
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});

/// Applies "section.field=value" to a config document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& assignments);

}  // namespace capsroute
