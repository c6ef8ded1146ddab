#include "capsroute/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>

namespace capsroute {

std::string_view to_string(Augmentation mode) {
  switch (mode) {
    case Augmentation::None: return "none";
    case Augmentation::Shift2: return "shift2";
    case Augmentation::Shift2Rot20: return "shift2+rot20";
  }
  return "none";
}

Augmentation parse_augmentation(std::string_view name) {
  if (name == "none") return Augmentation::None;
  if (name == "shift2") return Augmentation::Shift2;
  if (name == "shift2+rot20") return Augmentation::Shift2Rot20;
  throw ConfigError("train.augmentation: unknown mode '" + std::string(name) +
                    "' (expected none, shift2, shift2+rot20)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("train." + field + ": " + why); };
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (eval_batch_size < 1) fail("eval_batch_size", "must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail("base_lr", "must be positive");
  if (!(lr_decay_rate > 0.0 && lr_decay_rate <= 1.0)) fail("lr_decay_rate", "must be in (0, 1]");
  if (!(decay_step > 0.0)) fail("decay_step", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon", "must be positive");
}

void DataConfig::validate() const {
  if (name.empty()) throw ConfigError("data.name: must not be empty");
}

void RunConfig::validate() const {
  try {
    network.validate();
    loss.margin.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(loss.reconstruction_weight >= 0.0)) throw ConfigError("loss.reconstruction_weight: must be >= 0");
  train.validate();
  data.validate();
}

std::string RunConfig::run_id() const {
  return data.name + "_" + std::string(to_string(network.routing.norm.kind)) + "_r" +
         std::to_string(network.routing.iterations) + "_s" + std::to_string(train.seed);
}

RunConfig desk_scale_config() {
  RunConfig cfg;
  cfg.network.scale_factor = 4;
  // at 0.1 the unit-coefficient first pass saturates every parent capsule and
  // max-min runs collapse to chance
  cfg.network.transform_init_stddev = 0.01;
  cfg.network.routing.iterations = 3;
  cfg.network.routing.norm = Normalization{NormKind::MaxMin};
  cfg.train.batch_size = 128;
  cfg.train.epochs = 5;
  cfg.data.train_subset = 10000;
  return cfg;
}

nlohmann::json to_json(const Normalization& norm) {
  return {{"normalization", to_string(norm.kind)},
          {"lower", norm.lower},
          {"upper", norm.upper},
          {"axis", to_string(norm.axis)}};
}

nlohmann::json to_json(const NetworkConfig& c) {
  return {{"input_hw", c.input_hw},
          {"input_channels", c.input_channels},
          {"conv1_filters", c.conv1_filters},
          {"conv1_kernel", c.conv1_kernel},
          {"primarycaps_filters", c.primarycaps_filters},
          {"primarycaps_kernel", c.primarycaps_kernel},
          {"primarycaps_stride", c.primarycaps_stride},
          {"capsule_dim_child", c.capsule_dim_child},
          {"capsule_dim_parent", c.capsule_dim_parent},
          {"num_classes", c.num_classes},
          {"decoder_hidden1", c.decoder_hidden1},
          {"decoder_hidden2", c.decoder_hidden2},
          {"scale_factor", c.scale_factor},
          {"init_stddev", c.init_stddev},
          {"transform_init_stddev", c.transform_init_stddev}};
}

nlohmann::json to_json(const LossConfig& c) {
  return {{"m_plus", c.margin.m_plus},
          {"m_minus", c.margin.m_minus},
          {"lambda_down", c.margin.lambda_down},
          {"reconstruction_weight", c.reconstruction_weight}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"lr_decay_rate", c.lr_decay_rate},
          {"decay_step", c.decay_step},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"augmentation", to_string(c.augmentation)},
          {"seed", c.seed},
          {"max_steps", c.max_steps},
          {"eval_batch_size", c.eval_batch_size},
          {"eval_every_epoch", c.eval_every_epoch}};
}

nlohmann::json to_json(const DataConfig& c) {
  return {{"dir", c.dir},
          {"name", c.name},
          {"train_subset", c.train_subset},
          {"test_subset", c.test_subset},
          {"subset_seed", c.subset_seed}};
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json routing = to_json(c.network.routing.norm);
  routing["iterations"] = c.network.routing.iterations;
  routing["initial_coefficient"] = c.network.routing.initial_coefficient;
  return {{"network", to_json(c.network)},
          {"routing", routing},
          {"loss", to_json(c.loss)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)}};
}

namespace {

using Setter = std::function<void(const nlohmann::json&)>;
using Fields = std::map<std::string, Setter>;

template <typename V>
Setter setter(const std::string& field, V& target) {
  return [field, &target](const nlohmann::json& value) {
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!value.is_boolean()) throw ConfigError(field + ": expected a boolean");
        target = value.get<bool>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (value.is_string()) {
          target = value.get<std::string>();
        } else if (value.is_number()) {
          target = value.dump();
        } else {
          throw ConfigError(field + ": expected a string");
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!value.is_number()) throw ConfigError(field + ": expected a number");
        target = value.get<V>();
      } else {
        if (!value.is_number_integer()) throw ConfigError(field + ": expected an integer");
        if (std::is_unsigned_v<V> && value.get<long long>() < 0) throw ConfigError(field + ": must be >= 0");
        target = value.get<V>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field + ": " + e.what());
    }
  };
}

Setter parsed(const std::string& field, std::function<void(const std::string&)> assign) {
  return [field, assign](const nlohmann::json& value) {
    if (!value.is_string()) throw ConfigError(field + ": expected a string");
    try {
      assign(value.get<std::string>());
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(field + ": " + e.what());
    }
  };
}

void apply_section(const std::string& section, const nlohmann::json& j, const std::map<std::string, Setter>& fields) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(section + "." + key + ": unknown field");
    it->second(value);
  }
}

}  // namespace

void update_from_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  auto& n = cfg.network;
  auto& r = cfg.network.routing;
  auto& l = cfg.loss;
  auto& t = cfg.train;
  auto& d = cfg.data;
  const std::map<std::string, Fields> sections{
      {"network",
       Fields{{"input_hw", setter("network.input_hw", n.input_hw)},
        {"input_channels", setter("network.input_channels", n.input_channels)},
        {"conv1_filters", setter("network.conv1_filters", n.conv1_filters)},
        {"conv1_kernel", setter("network.conv1_kernel", n.conv1_kernel)},
        {"primarycaps_filters", setter("network.primarycaps_filters", n.primarycaps_filters)},
        {"primarycaps_kernel", setter("network.primarycaps_kernel", n.primarycaps_kernel)},
        {"primarycaps_stride", setter("network.primarycaps_stride", n.primarycaps_stride)},
        {"capsule_dim_child", setter("network.capsule_dim_child", n.capsule_dim_child)},
        {"capsule_dim_parent", setter("network.capsule_dim_parent", n.capsule_dim_parent)},
        {"num_classes", setter("network.num_classes", n.num_classes)},
        {"decoder_hidden1", setter("network.decoder_hidden1", n.decoder_hidden1)},
        {"decoder_hidden2", setter("network.decoder_hidden2", n.decoder_hidden2)},
        {"scale_factor", setter("network.scale_factor", n.scale_factor)},
        {"init_stddev", setter("network.init_stddev", n.init_stddev)},
        {"transform_init_stddev", setter("network.transform_init_stddev", n.transform_init_stddev)}}},
      {"routing",
       Fields{{"normalization",
         parsed("routing.normalization", [&](const std::string& s) { r.norm.kind = parse_norm_kind(s); })},
        {"lower", setter("routing.lower", r.norm.lower)},
        {"upper", setter("routing.upper", r.norm.upper)},
        {"axis", parsed("routing.axis", [&](const std::string& s) { r.norm.axis = parse_norm_axis(s); })},
        {"iterations", setter("routing.iterations", r.iterations)},
        {"initial_coefficient", setter("routing.initial_coefficient", r.initial_coefficient)}}},
      {"loss",
       Fields{{"m_plus", setter("loss.m_plus", l.margin.m_plus)},
        {"m_minus", setter("loss.m_minus", l.margin.m_minus)},
        {"lambda_down", setter("loss.lambda_down", l.margin.lambda_down)},
        {"reconstruction_weight", setter("loss.reconstruction_weight", l.reconstruction_weight)}}},
      {"train",
       Fields{{"batch_size", setter("train.batch_size", t.batch_size)},
        {"epochs", setter("train.epochs", t.epochs)},
        {"base_lr", setter("train.base_lr", t.base_lr)},
        {"lr_decay_rate", setter("train.lr_decay_rate", t.lr_decay_rate)},
        {"decay_step", setter("train.decay_step", t.decay_step)},
        {"beta1", setter("train.beta1", t.beta1)},
        {"beta2", setter("train.beta2", t.beta2)},
        {"adam_epsilon", setter("train.adam_epsilon", t.adam_epsilon)},
        {"augmentation",
         parsed("train.augmentation", [&](const std::string& s) { t.augmentation = parse_augmentation(s); })},
        {"seed", setter("train.seed", t.seed)},
        {"max_steps", setter("train.max_steps", t.max_steps)},
        {"eval_batch_size", setter("train.eval_batch_size", t.eval_batch_size)},
        {"eval_every_epoch", setter("train.eval_every_epoch", t.eval_every_epoch)}}},
      {"data",
       Fields{{"dir", setter("data.dir", d.dir)},
        {"name", setter("data.name", d.name)},
        {"train_subset", setter("data.train_subset", d.train_subset)},
        {"test_subset", setter("data.test_subset", d.test_subset)},
        {"subset_seed", setter("data.subset_seed", d.subset_seed)}}},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = sections.find(key);
    if (it == sections.end()) throw ConfigError(key + ": unknown section");
    apply_section(key, value, it->second);
  }
}

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base) {
  RunConfig cfg = base;
  update_from_json(cfg, j);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, base);
}

void apply_override(nlohmann::json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "': expected section.field=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size() || key.find('.', dot + 1) != std::string::npos) {
    throw ConfigError("override '" + key + "': expected section.field");
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  if (!doc.is_object()) doc = nlohmann::json::object();
  doc[key.substr(0, dot)][key.substr(dot + 1)] = value;
}

void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) apply_override(doc, a);
}

}  // namespace capsroute
