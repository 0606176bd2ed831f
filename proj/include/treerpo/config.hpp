// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "treerpo/errors.hpp"
#include "treerpo/trainer.hpp"

namespace treerpo {

// Flat key = value config. '#' starts a comment. A [reference_paper_config]
// section may follow the run keys; its entries are documentation only (kept
// and re-emitted verbatim, never applied).

inline constexpr std::string_view kReferenceSection = "reference_paper_config";

struct ConfigFile {
  TrainConfig config;
  std::vector<std::pair<std::string, std::string>> reference;

  friend bool operator==(const ConfigFile&, const ConfigFile&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE)
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE)
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

inline int parse_small_int(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < -1'000'000'000LL || x > 1'000'000'000LL) throw ConfigError(key + ": out of range");
  return static_cast<int>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

struct Field {
  std::string_view key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define TREERPO_INT_FIELD(name, member)                                                   \
  Field {                                                                                 \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },                  \
        [](TrainConfig& c, const std::string& v) { c.member = parse_small_int(name, v); } \
  }
#define TREERPO_DOUBLE_FIELD(name, member)                                             \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return fmt_double(c.member); },                   \
        [](TrainConfig& c, const std::string& v) { c.member = parse_double(name, v); } \
  }
#define TREERPO_BOOL_FIELD(name, member)                                             \
  Field {                                                                            \
    name, [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](TrainConfig& c, const std::string& v) { c.member = parse_bool(name, v); } \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"mode", [](const TrainConfig& c) { return std::string(c.mode == TrainMode::kTreeRpo ? "treerpo" : "grpo"); },
            [](TrainConfig& c, const std::string& v) {
              if (v == "treerpo") c.mode = TrainMode::kTreeRpo;
              else if (v == "grpo") c.mode = TrainMode::kGrpo;
              else throw ConfigError("mode: expected treerpo or grpo, got '" + v + "'");
            }},
      Field{"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
            [](TrainConfig& c, const std::string& v) {
              const long long x = parse_int("seed", v);
              if (x < 0) throw ConfigError("seed: must be >= 0");
              c.seed = static_cast<std::uint64_t>(x);
            }},
      TREERPO_INT_FIELD("iterations", iterations),
      TREERPO_DOUBLE_FIELD("clip_eps", clip_eps),
      TREERPO_DOUBLE_FIELD("kl_beta", kl_beta),
      Field{"kl_estimator", [](const TrainConfig& c) { return std::string(c.kl_estimator == KlEstimator::kExact ? "exact" : "k3"); },
            [](TrainConfig& c, const std::string& v) {
              if (v == "exact") c.kl_estimator = KlEstimator::kExact;
              else if (v == "k3") c.kl_estimator = KlEstimator::kK3;
              else throw ConfigError("kl_estimator: expected exact or k3, got '" + v + "'");
            }},
      TREERPO_DOUBLE_FIELD("entropy_alpha", entropy_alpha),
      Field{"optimizer", [](const TrainConfig& c) { return std::string(c.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"); },
            [](TrainConfig& c, const std::string& v) {
              if (v == "adam") c.optimizer = OptimizerKind::kAdam;
              else if (v == "sgd") c.optimizer = OptimizerKind::kSgd;
              else throw ConfigError("optimizer: expected adam or sgd, got '" + v + "'");
            }},
      TREERPO_DOUBLE_FIELD("learning_rate", learning_rate),
      TREERPO_DOUBLE_FIELD("adam_beta1", adam_beta1),
      TREERPO_DOUBLE_FIELD("adam_beta2", adam_beta2),
      TREERPO_DOUBLE_FIELD("adam_eps", adam_eps),
      TREERPO_DOUBLE_FIELD("minibatch_fraction", minibatch_fraction),
      TREERPO_DOUBLE_FIELD("tau", tau),
      Field{"advantage", [](const TrainConfig& c) {
              if (!c.advantage) return std::string("auto");
              return std::string(*c.advantage == AdvantageVariant::kTreeRpo ? "treerpo" : "grpo_std");
            },
            [](TrainConfig& c, const std::string& v) {
              if (v == "auto") c.advantage.reset();
              else if (v == "treerpo") c.advantage = AdvantageVariant::kTreeRpo;
              else if (v == "grpo_std") c.advantage = AdvantageVariant::kGrpoStd;
              else throw ConfigError("advantage: expected auto, treerpo or grpo_std, got '" + v + "'");
            }},
      TREERPO_DOUBLE_FIELD("sigma_floor", sigma_floor),
      TREERPO_BOOL_FIELD("grpo_prune", grpo_prune),
      TREERPO_INT_FIELD("branching", tree.branching),
      TREERPO_INT_FIELD("max_depth", tree.max_depth),
      TREERPO_INT_FIELD("step_tokens", tree.step_tokens),
      TREERPO_DOUBLE_FIELD("temperature", tree.temperature),
      Field{"node_cap", [](const TrainConfig& c) { return std::to_string(c.tree.node_cap); },
            [](TrainConfig& c, const std::string& v) {
              const long long x = parse_int("node_cap", v);
              if (x < 1) throw ConfigError("node_cap: must be >= 1");
              c.tree.node_cap = static_cast<std::size_t>(x);
            }},
      TREERPO_INT_FIELD("group_size", group_size),
      TREERPO_INT_FIELD("max_tokens", max_tokens),
      TREERPO_INT_FIELD("tasks_per_batch", tasks_per_batch),
      TREERPO_INT_FIELD("rollout_threads", rollout_threads),
      TREERPO_INT_FIELD("window", window),
      TREERPO_DOUBLE_FIELD("init_scale", init_scale),
      TREERPO_INT_FIELD("ref_refresh_every", ref_refresh_every),
      TREERPO_INT_FIELD("difficulty_min", difficulty_min),
      TREERPO_INT_FIELD("difficulty_max", difficulty_max),
      TREERPO_INT_FIELD("modulus", modulus),
      TREERPO_INT_FIELD("eval_tasks", eval_tasks),
      TREERPO_INT_FIELD("eval_every", eval_every),
      TREERPO_INT_FIELD("eval_samples", eval.samples_per_task),
      TREERPO_DOUBLE_FIELD("eval_temperature", eval.temperature),
      TREERPO_INT_FIELD("eval_max_tokens", eval.max_tokens),
      Field{"eval_seed", [](const TrainConfig& c) { return std::to_string(c.eval.seed); },
            [](TrainConfig& c, const std::string& v) {
              const long long x = parse_int("eval_seed", v);
              if (x < 0) throw ConfigError("eval_seed: must be >= 0");
              c.eval.seed = static_cast<std::uint64_t>(x);
            }},
      TREERPO_INT_FIELD("checkpoint_every", checkpoint_every),
      TREERPO_BOOL_FIELD("log_wall_time", log_wall_time),
  };
  return table;
}

#undef TREERPO_INT_FIELD
#undef TREERPO_DOUBLE_FIELD
#undef TREERPO_BOOL_FIELD

inline const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.emplace_back(f.key);
  return keys;
}

/// Sets one key; throws ConfigError naming the key on failure.
inline void set_config_value(TrainConfig& cfg, std::string_view key, const std::string& value) {
  const auto* f = detail::find_field(key);
  if (!f) throw ConfigError(std::string(key) + ": unknown config key");
  f->set(cfg, value);
}

inline std::string get_config_value(const TrainConfig& cfg, std::string_view key) {
  const auto* f = detail::find_field(key);
  if (!f) throw ConfigError(std::string(key) + ": unknown config key");
  return f->get(cfg);
}

/// Parses without validating ranges (see validate()).
inline ConfigFile parse_config(std::string_view text) {
  ConfigFile file;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool in_reference = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string s = detail::trim(line);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s != "[" + std::string(kReferenceSection) + "]")
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section " + s);
      in_reference = true;
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    if (in_reference) {
      if (!detail::find_field(key)) throw ConfigError(key + ": unknown config key in reference block");
      TrainConfig scratch;
      set_config_value(scratch, key, value);  // must still parse
      file.reference.emplace_back(key, value);
    } else {
      set_config_value(file.config, key, value);
    }
  }
  return file;
}

inline std::string serialize_config(const ConfigFile& file) {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(file.config) + "\n";
  if (!file.reference.empty()) {
    out += "\n[" + std::string(kReferenceSection) + "]\n";
    for (const auto& [k, v] : file.reference) out += k + " = " + v + "\n";
  }
  return out;
}

/// Any key can be overridden by TREERPO_<KEY> (upper-case) in the environment.
inline std::vector<std::string> apply_env_overrides(
    TrainConfig& cfg, const std::function<const char*(const char*)>& getenv_fn = [](const char* n) {
      return static_cast<const char*>(std::getenv(n));
    }) {
  std::vector<std::string> applied;
  for (const auto& f : detail::fields()) {
    std::string var = "TREERPO_";
    for (char c : f.key) var += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (const char* v = getenv_fn(var.c_str())) {
      f.set(cfg, detail::trim(v));
      applied.push_back(var);
    }
  }
  return applied;
}

/// Full-scale reference settings, shipped for documentation only.
inline std::vector<std::pair<std::string, std::string>> reference_paper_settings() {
  return {{"branching", "8"},        {"max_depth", "3"},         {"step_tokens", "384"},
          {"tau", "0.1"},            {"kl_beta", "0.001"},       {"entropy_alpha", "-0.001"},
          {"learning_rate", "1e-6"}, {"temperature", "0.6"},     {"eval_temperature", "0.6"},
          {"eval_samples", "8"},     {"minibatch_fraction", "0.5"}, {"group_size", "8"},
          {"max_tokens", "1152"},    {"tasks_per_batch", "128"}};
}

}  // namespace treerpo
