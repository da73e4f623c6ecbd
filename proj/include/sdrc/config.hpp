#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sdrc/cpc.hpp"
#include "sdrc/episodes.hpp"
#include "sdrc/errors.hpp"
#include "sdrc/trainer.hpp"
#include "sdrc/vit.hpp"

// Flat key=value experiment configuration. Every key has a default,
// unknown keys are rejected, and parse(render(config)) == config.

namespace sdrc {

struct ExperimentConfig {
  std::uint64_t seed = 42;

  int vit_layers = 4;
  int vit_dim = 32;
  int vit_heads = 2;
  int vit_patch_n = 8;
  int vit_mlp_ratio = 2;
  Granularity vit_granularity = Granularity::kPerBlock;
  NormMode vit_norm = NormMode::kNormFree;

  int data_height = 32;
  int data_width = 32;
  int data_channels = 1;
  int data_classes = 6;
  int data_samples_per_class = 12;

  float source_texture_shift = 0.f;
  int source_palette_rotation = 0;
  float source_clutter = 0.1f;
  float target_texture_shift = 1.5f;
  int target_palette_rotation = 2;
  float target_clutter = 0.4f;
  int target_class_base = 1000;

  int train_episodes = 300;
  float train_lr = 1e-3f;
  OptimizerKind train_optimizer = OptimizerKind::kAdam;
  float train_lambda = 0.1f;
  int train_k = 1;
  Metric train_metric = Metric::kCosine;
  bool train_cpc = true;
  bool train_osd = true;
  bool train_afw = true;
  float train_temperature = 10.f;
  int train_finetune_steps = 50;
  float train_finetune_lr = 1e-2f;
  bool train_leave_one_out = false;
  int osd_rank = 8;

  int eval_episodes = 100;
  int analysis_samples = 32;
  int analysis_bins = 8;
  int analysis_topk = 4;

  std::string paths_source_data = "source.epds";
  std::string paths_target_data = "target.epds";
  std::string paths_checkpoint = "checkpoint.sdrc";

  VitConfig vit_config() const {
    VitConfig c;
    c.layers = vit_layers;
    c.dim = vit_dim;
    c.heads = vit_heads;
    c.patch_n = vit_patch_n;
    c.mlp_ratio = vit_mlp_ratio;
    c.granularity = vit_granularity;
    c.norm = vit_norm;
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.episodes = train_episodes;
    t.lr = train_lr;
    t.optimizer = train_optimizer;
    t.lambda = train_lambda;
    t.k_shot = train_k;
    t.metric = train_metric;
    t.cpc = train_cpc;
    t.osd = train_osd;
    t.afw = train_afw;
    t.seed = seed;
    t.osd_rank = osd_rank;
    t.temperature = train_temperature;
    t.finetune_steps = train_finetune_steps;
    t.finetune_lr = train_finetune_lr;
    t.leave_one_out = train_leave_one_out;
    return t;
  }

  DomainSpec source_spec() const {
    DomainSpec s;
    s.seed = derive_seed(seed, 0x736F7572ULL);  // source stream
    s.image_h = data_height;
    s.image_w = data_width;
    s.channels = data_channels;
    s.class_id_base = 0;
    s.texture_freq_offset = source_texture_shift;
    s.palette_rotation = source_palette_rotation;
    s.clutter_density = source_clutter;
    return s;
  }

  DomainSpec target_spec() const {
    DomainSpec s;
    s.seed = derive_seed(seed, 0x74677400ULL);  // target stream
    s.image_h = data_height;
    s.image_w = data_width;
    s.channels = data_channels;
    s.class_id_base = target_class_base;
    s.texture_freq_offset = target_texture_shift;
    s.palette_rotation = target_palette_rotation;
    s.clutter_density = target_clutter;
    return s;
  }
};

namespace detail {

inline std::string render_float(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct ConfigField {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  // Returns an error message, empty on success.
  std::function<std::string(ExperimentConfig&, const std::string&)> set;
};

inline std::string set_int(int& slot, const std::string& v) {
  int parsed = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), parsed);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) return "expected an integer";
  slot = parsed;
  return {};
}

inline std::string set_u64(std::uint64_t& slot, const std::string& v) {
  std::uint64_t parsed = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), parsed);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    return "expected a non-negative integer";
  slot = parsed;
  return {};
}

inline std::string set_float(float& slot, const std::string& v) {
  float parsed = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), parsed);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) return "expected a number";
  slot = parsed;
  return {};
}

inline std::string set_bool(bool& slot, const std::string& v) {
  if (v == "true" || v == "1") {
    slot = true;
    return {};
  }
  if (v == "false" || v == "0") {
    slot = false;
    return {};
  }
  return "expected true or false";
}

inline const std::vector<ConfigField>& config_fields() {
  auto int_field = [](const char* key, int ExperimentConfig::* member) {
    return ConfigField{key,
                       [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
                       [member](ExperimentConfig& c, const std::string& v) {
                         return set_int(c.*member, v);
                       }};
  };
  auto float_field = [](const char* key, float ExperimentConfig::* member) {
    return ConfigField{key,
                       [member](const ExperimentConfig& c) { return render_float(c.*member); },
                       [member](ExperimentConfig& c, const std::string& v) {
                         return set_float(c.*member, v);
                       }};
  };
  auto bool_field = [](const char* key, bool ExperimentConfig::* member) {
    return ConfigField{key,
                       [member](const ExperimentConfig& c) {
                         return std::string(c.*member ? "true" : "false");
                       },
                       [member](ExperimentConfig& c, const std::string& v) {
                         return set_bool(c.*member, v);
                       }};
  };
  auto string_field = [](const char* key, std::string ExperimentConfig::* member) {
    return ConfigField{key, [member](const ExperimentConfig& c) { return c.*member; },
                       [member](ExperimentConfig& c, const std::string& v) {
                         c.*member = v;
                         return std::string();
                       }};
  };

  static const std::vector<ConfigField> fields = {
      {"seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
       [](ExperimentConfig& c, const std::string& v) { return set_u64(c.seed, v); }},
      int_field("vit.layers", &ExperimentConfig::vit_layers),
      int_field("vit.dim", &ExperimentConfig::vit_dim),
      int_field("vit.heads", &ExperimentConfig::vit_heads),
      int_field("vit.patch_n", &ExperimentConfig::vit_patch_n),
      int_field("vit.mlp_ratio", &ExperimentConfig::vit_mlp_ratio),
      {"vit.granularity",
       [](const ExperimentConfig& c) {
         return std::string(c.vit_granularity == Granularity::kPerSublayer ? "per-sublayer"
                                                                           : "per-block");
       },
       [](ExperimentConfig& c, const std::string& v) -> std::string {
         if (v == "per-block") {
           c.vit_granularity = Granularity::kPerBlock;
           return {};
         }
         if (v == "per-sublayer") {
           c.vit_granularity = Granularity::kPerSublayer;
           return {};
         }
         return "expected per-block or per-sublayer";
       }},
      {"vit.norm",
       [](const ExperimentConfig& c) {
         return std::string(c.vit_norm == NormMode::kPreNorm ? "pre-norm" : "norm-free");
       },
       [](ExperimentConfig& c, const std::string& v) -> std::string {
         if (v == "norm-free") {
           c.vit_norm = NormMode::kNormFree;
           return {};
         }
         if (v == "pre-norm") {
           c.vit_norm = NormMode::kPreNorm;
           return {};
         }
         return "expected norm-free or pre-norm";
       }},
      int_field("data.height", &ExperimentConfig::data_height),
      int_field("data.width", &ExperimentConfig::data_width),
      int_field("data.channels", &ExperimentConfig::data_channels),
      int_field("data.classes", &ExperimentConfig::data_classes),
      int_field("data.samples_per_class", &ExperimentConfig::data_samples_per_class),
      float_field("source.texture_shift", &ExperimentConfig::source_texture_shift),
      int_field("source.palette_rotation", &ExperimentConfig::source_palette_rotation),
      float_field("source.clutter", &ExperimentConfig::source_clutter),
      float_field("target.texture_shift", &ExperimentConfig::target_texture_shift),
      int_field("target.palette_rotation", &ExperimentConfig::target_palette_rotation),
      float_field("target.clutter", &ExperimentConfig::target_clutter),
      int_field("target.class_base", &ExperimentConfig::target_class_base),
      int_field("train.episodes", &ExperimentConfig::train_episodes),
      float_field("train.lr", &ExperimentConfig::train_lr),
      {"train.optimizer",
       [](const ExperimentConfig& c) {
         return std::string(c.train_optimizer == OptimizerKind::kAdam ? "adam" : "sgd");
       },
       [](ExperimentConfig& c, const std::string& v) -> std::string {
         if (v == "adam") {
           c.train_optimizer = OptimizerKind::kAdam;
           return {};
         }
         if (v == "sgd") {
           c.train_optimizer = OptimizerKind::kSgd;
           return {};
         }
         return "expected adam or sgd";
       }},
      float_field("train.lambda", &ExperimentConfig::train_lambda),
      int_field("train.k", &ExperimentConfig::train_k),
      {"train.metric",
       [](const ExperimentConfig& c) { return std::string(metric_name(c.train_metric)); },
       [](ExperimentConfig& c, const std::string& v) -> std::string {
         if (v == "cosine") {
           c.train_metric = Metric::kCosine;
           return {};
         }
         if (v == "euclidean") {
           c.train_metric = Metric::kEuclidean;
           return {};
         }
         if (v == "dot") {
           c.train_metric = Metric::kDot;
           return {};
         }
         return "expected cosine, euclidean or dot";
       }},
      bool_field("train.cpc", &ExperimentConfig::train_cpc),
      bool_field("train.osd", &ExperimentConfig::train_osd),
      bool_field("train.afw", &ExperimentConfig::train_afw),
      float_field("train.temperature", &ExperimentConfig::train_temperature),
      int_field("train.finetune_steps", &ExperimentConfig::train_finetune_steps),
      float_field("train.finetune_lr", &ExperimentConfig::train_finetune_lr),
      bool_field("train.leave_one_out", &ExperimentConfig::train_leave_one_out),
      int_field("osd.rank", &ExperimentConfig::osd_rank),
      int_field("eval.episodes", &ExperimentConfig::eval_episodes),
      int_field("analysis.samples", &ExperimentConfig::analysis_samples),
      int_field("analysis.bins", &ExperimentConfig::analysis_bins),
      int_field("analysis.topk", &ExperimentConfig::analysis_topk),
      string_field("paths.source_data", &ExperimentConfig::paths_source_data),
      string_field("paths.target_data", &ExperimentConfig::paths_target_data),
      string_field("paths.checkpoint", &ExperimentConfig::paths_checkpoint),
  };
  return fields;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const ConfigField& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

struct ParsedConfig {
  ExperimentConfig config;
  std::vector<std::string> warnings;  // duplicate-key notices
};

// Applies one key=value assignment; throws ConfigError naming the key and
// the offending location.
inline void apply_config_entry(ExperimentConfig& config, const std::string& key,
                               const std::string& value, const std::string& where) {
  const detail::ConfigField* field = detail::find_field(key);
  if (!field) throw ConfigError("unknown config key '" + key + "' (" + where + ")");
  const std::string err = field->set(config, value);
  if (!err.empty())
    throw ConfigError("bad value for '" + key + "': " + err + " (" + where + ")");
}

inline ParsedConfig parse_config(const std::string& text,
                                 ExperimentConfig base = ExperimentConfig{}) {
  ParsedConfig out;
  out.config = base;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("missing '=' at line " + std::to_string(line_no));
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key at line " + std::to_string(line_no));
    auto it = seen.find(key);
    if (it != seen.end())
      out.warnings.push_back("duplicate key '" + key + "' at line " + std::to_string(line_no) +
                             " overrides line " + std::to_string(it->second));
    seen[key] = line_no;
    apply_config_entry(out.config, key, value, "line " + std::to_string(line_no));
  }
  return out;
}

// Canonical rendering of every key; parse(render(c)) == c.
inline std::string render_config(const ExperimentConfig& config) {
  std::string out;
  for (const detail::ConfigField& f : detail::config_fields()) {
    out += f.key;
    out += " = ";
    out += f.get(config);
    out += "\n";
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> config_entries(
    const ExperimentConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const detail::ConfigField& f : detail::config_fields())
    out.emplace_back(f.key, f.get(config));
  return out;
}

}  // namespace sdrc
