#pragma once

// Flat key=value run configuration: one struct covering scene, sampling, both
// training stages and the experiment protocol, with a schema-driven parser and
// echo so resolved configs can be stored next to results.

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rkm/kan.hpp"
#include "rkm/refiner.hpp"
#include "rkm/scene.hpp"
#include "rkm/sim.hpp"

namespace rkm {

struct RunConfig {
  // scene
  std::size_t grid_h = 32;
  std::size_t grid_w = 32;
  double cell_size_m = 4.0;
  std::size_t buildings_min = 4;
  std::size_t buildings_max = 8;
  std::size_t building_size_min = 2;
  std::size_t building_size_max = 6;
  std::size_t transmitters = 1;
  std::vector<double> frequencies_hz = {868e6, 1800e6};
  // propagation
  double sim_exponent = 3.0;
  double sim_d0_m = 4.0;
  double sim_alpha_db = 2.5;
  double sim_p0_db = -30.0;
  double sim_clip_db = 120.0;
  // sampling
  std::vector<double> ratios = {0.001, 0.01, 0.10, 0.20};
  double noise_sigma = 0.0;
  bool shared_cells = true;
  // coarse stage
  std::size_t kan_grid = 8;
  std::size_t kan_order = 3;
  std::vector<std::uint64_t> kan_hidden = {16, 16};
  std::size_t kan_epochs = 1000;
  double kan_lr = 0.01;
  double kan_lambda = 1e-4;
  // refinement stage
  std::size_t enc1 = 16;
  std::size_t enc2 = 32;
  std::size_t patch = 4;
  std::size_t token_dim = 64;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 128;
  double lambda_lb = 0.01;
  bool use_moe = true;
  std::size_t ref_epochs = 100;
  double ref_lr = 3e-3;
  // experiment protocol
  std::size_t train_scenes = 60;
  std::size_t val_scenes = 10;
  std::size_t test_scenes = 10;
  std::vector<std::string> methods = {"kan", "idw", "kriging", "rkm"};
  std::vector<std::uint64_t> seeds = {1};
  std::size_t ablation_train_scenes = 20;
  std::size_t ablation_test_scenes = 6;
  double ablation_ratio = 0.01;
  std::size_t ablation_epochs = 40;
  bool record_timing = false;
  bool open_space_metrics = false;
  std::string out_dir = "out";
};

namespace detail {

using ConfigMember =
    std::variant<std::size_t RunConfig::*, double RunConfig::*, bool RunConfig::*,
                 std::string RunConfig::*, std::vector<double> RunConfig::*,
                 std::vector<std::uint64_t> RunConfig::*, std::vector<std::string> RunConfig::*>;

struct ConfigField {
  const char* key;
  ConfigMember member;
};

inline const std::vector<ConfigField>& config_schema() {
  static const std::vector<ConfigField> schema = {
      {"grid_h", &RunConfig::grid_h},
      {"grid_w", &RunConfig::grid_w},
      {"cell_size_m", &RunConfig::cell_size_m},
      {"buildings_min", &RunConfig::buildings_min},
      {"buildings_max", &RunConfig::buildings_max},
      {"building_size_min", &RunConfig::building_size_min},
      {"building_size_max", &RunConfig::building_size_max},
      {"transmitters", &RunConfig::transmitters},
      {"frequencies_hz", &RunConfig::frequencies_hz},
      {"sim_exponent", &RunConfig::sim_exponent},
      {"sim_d0_m", &RunConfig::sim_d0_m},
      {"sim_alpha_db", &RunConfig::sim_alpha_db},
      {"sim_p0_db", &RunConfig::sim_p0_db},
      {"sim_clip_db", &RunConfig::sim_clip_db},
      {"ratios", &RunConfig::ratios},
      {"noise_sigma", &RunConfig::noise_sigma},
      {"shared_cells", &RunConfig::shared_cells},
      {"kan_grid", &RunConfig::kan_grid},
      {"kan_order", &RunConfig::kan_order},
      {"kan_hidden", &RunConfig::kan_hidden},
      {"kan_epochs", &RunConfig::kan_epochs},
      {"kan_lr", &RunConfig::kan_lr},
      {"kan_lambda", &RunConfig::kan_lambda},
      {"enc1", &RunConfig::enc1},
      {"enc2", &RunConfig::enc2},
      {"patch", &RunConfig::patch},
      {"token_dim", &RunConfig::token_dim},
      {"blocks", &RunConfig::blocks},
      {"heads", &RunConfig::heads},
      {"experts", &RunConfig::experts},
      {"top_k", &RunConfig::top_k},
      {"expert_hidden", &RunConfig::expert_hidden},
      {"lambda_lb", &RunConfig::lambda_lb},
      {"use_moe", &RunConfig::use_moe},
      {"ref_epochs", &RunConfig::ref_epochs},
      {"ref_lr", &RunConfig::ref_lr},
      {"train_scenes", &RunConfig::train_scenes},
      {"val_scenes", &RunConfig::val_scenes},
      {"test_scenes", &RunConfig::test_scenes},
      {"methods", &RunConfig::methods},
      {"seeds", &RunConfig::seeds},
      {"ablation_train_scenes", &RunConfig::ablation_train_scenes},
      {"ablation_test_scenes", &RunConfig::ablation_test_scenes},
      {"ablation_ratio", &RunConfig::ablation_ratio},
      {"ablation_epochs", &RunConfig::ablation_epochs},
      {"record_timing", &RunConfig::record_timing},
      {"open_space_metrics", &RunConfig::open_space_metrics},
      {"out_dir", &RunConfig::out_dir},
  };
  return schema;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t comma = s.find(',', start);
    if (comma == std::string::npos) {
      parts.push_back(trim(s.substr(start)));
      break;
    }
    parts.push_back(trim(s.substr(start, comma - start)));
    start = comma + 1;
  }
  if (parts.size() == 1 && parts[0].empty()) parts.clear();
  return parts;
}

[[noreturn]] inline void config_error(std::size_t line, const std::string& what) {
  throw std::runtime_error("config line " + std::to_string(line) + ": " + what);
}

inline double parse_double_or_die(const std::string& v, const char* key, std::size_t line) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) config_error(line, std::string("expected number for '") + key + "'");
    return d;
  } catch (const std::runtime_error&) {
    throw;
  } catch (const std::exception&) {
    config_error(line, std::string("expected number for '") + key + "'");
  }
}

inline std::uint64_t parse_uint_or_die(const std::string& v, const char* key, std::size_t line) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-')
      config_error(line, std::string("expected non-negative integer for '") + key + "'");
    unsigned long long u = std::stoull(v, &used);
    if (used != v.size())
      config_error(line, std::string("expected integer for '") + key + "'");
    return static_cast<std::uint64_t>(u);
  } catch (const std::runtime_error&) {
    throw;
  } catch (const std::exception&) {
    config_error(line, std::string("expected integer for '") + key + "'");
  }
}

inline bool parse_bool_or_die(const std::string& v, const char* key, std::size_t line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  config_error(line, std::string("expected true/false for '") + key + "'");
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void assign_field(RunConfig& cfg, const ConfigField& field, const std::string& value,
                         std::size_t line) {
  std::visit(
      [&](auto member) {
        using M = std::decay_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<M, std::size_t>) {
          cfg.*member = static_cast<std::size_t>(parse_uint_or_die(value, field.key, line));
        } else if constexpr (std::is_same_v<M, double>) {
          cfg.*member = parse_double_or_die(value, field.key, line);
        } else if constexpr (std::is_same_v<M, bool>) {
          cfg.*member = parse_bool_or_die(value, field.key, line);
        } else if constexpr (std::is_same_v<M, std::string>) {
          cfg.*member = value;
        } else if constexpr (std::is_same_v<M, std::vector<double>>) {
          M out;
          for (const auto& p : split_list(value))
            out.push_back(parse_double_or_die(p, field.key, line));
          cfg.*member = std::move(out);
        } else if constexpr (std::is_same_v<M, std::vector<std::uint64_t>>) {
          M out;
          for (const auto& p : split_list(value))
            out.push_back(parse_uint_or_die(p, field.key, line));
          cfg.*member = std::move(out);
        } else {
          cfg.*member = split_list(value);
        }
      },
      field.member);
}

inline std::string format_field(const RunConfig& cfg, const ConfigField& field) {
  return std::visit(
      [&](auto member) -> std::string {
        using M = std::decay_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<M, std::size_t>) {
          return std::to_string(cfg.*member);
        } else if constexpr (std::is_same_v<M, double>) {
          return fmt_double(cfg.*member);
        } else if constexpr (std::is_same_v<M, bool>) {
          return (cfg.*member) ? "true" : "false";
        } else if constexpr (std::is_same_v<M, std::string>) {
          return cfg.*member;
        } else {
          std::string s;
          bool first = true;
          for (const auto& e : cfg.*member) {
            if (!first) s += ",";
            first = false;
            if constexpr (std::is_same_v<M, std::vector<double>>)
              s += fmt_double(e);
            else if constexpr (std::is_same_v<M, std::vector<std::string>>)
              s += e;
            else
              s += std::to_string(e);
          }
          return s;
        }
      },
      field.member);
}

}  // namespace detail

// `key = value` lines; '#' starts a comment; unknown keys and type mismatches
// raise with the offending line number; missing keys keep their defaults.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    ++line_no;
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;

    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    std::size_t eq = line.find('=');
    if (eq == std::string::npos) detail::config_error(line_no, "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) detail::config_error(line_no, "empty key");

    const detail::ConfigField* hit = nullptr;
    for (const auto& f : detail::config_schema())
      if (key == f.key) {
        hit = &f;
        break;
      }
    if (hit == nullptr) detail::config_error(line_no, "unknown key '" + key + "'");
    detail::assign_field(cfg, *hit, value, line_no);
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

// Full resolved config, one key per line, schema order; re-parses to an equal
// config (doubles are printed with 17 significant digits).
inline std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_schema()) {
    out += f.key;
    out += " = ";
    out += detail::format_field(cfg, f);
    out += "\n";
  }
  return out;
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64(echo_config(cfg));
}

// ---------------------------------------------------------------------------
// Adapters into the module-level configs

inline SceneSpec to_scene_spec(const RunConfig& cfg) {
  SceneSpec s;
  s.H = cfg.grid_h;
  s.W = cfg.grid_w;
  s.cell_size_m = cfg.cell_size_m;
  s.building_count_min = cfg.buildings_min;
  s.building_count_max = cfg.buildings_max;
  s.building_size_min = cfg.building_size_min;
  s.building_size_max = cfg.building_size_max;
  s.n_tx = cfg.transmitters;
  s.frequencies_hz = cfg.frequencies_hz;
  return s;
}

inline SimParams to_sim_params(const RunConfig& cfg) {
  SimParams p;
  p.path_loss_exponent = cfg.sim_exponent;
  p.d0_m = cfg.sim_d0_m;
  p.alpha_db = cfg.sim_alpha_db;
  p.p0_db = cfg.sim_p0_db;
  p.clip_range_db = cfg.sim_clip_db;
  return p;
}

inline std::vector<std::size_t> to_kan_widths(const RunConfig& cfg) {
  std::vector<std::size_t> w;
  w.push_back(cfg.frequencies_hz.size() + 5);
  for (std::uint64_t h : cfg.kan_hidden) w.push_back(static_cast<std::size_t>(h));
  w.push_back(1);
  return w;
}

inline KanTrainConfig to_kan_train_config(const RunConfig& cfg, std::uint64_t seed) {
  KanTrainConfig k;
  k.epochs = cfg.kan_epochs;
  k.lr = cfg.kan_lr;
  k.lambda_smooth = cfg.kan_lambda;
  k.seed = seed;
  return k;
}

inline RefinerConfig to_refiner_config(const RunConfig& cfg) {
  RefinerConfig r = default_refiner_config(cfg.frequencies_hz.size());
  r.grid_h = cfg.grid_h;
  r.grid_w = cfg.grid_w;
  r.enc1 = cfg.enc1;
  r.enc2 = cfg.enc2;
  r.patch = cfg.patch;
  r.token_dim = cfg.token_dim;
  r.blocks = cfg.blocks;
  r.heads = cfg.heads;
  r.experts = cfg.experts;
  r.top_k = cfg.top_k;
  r.expert_hidden = cfg.expert_hidden;
  r.lambda_lb = cfg.lambda_lb;
  r.use_moe = cfg.use_moe;
  return r;
}

}  // namespace rkm
