// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a JSON file with env / data / model / bisim / trainer /
// rollout sections, merged with flat dotted-key overrides. Unknown keys are
// rejected; the resolved config is echoed into every run directory.
#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/cbl.hpp"
#include "fusion/common.hpp"
#include "fusion/env.hpp"
#include "fusion/model.hpp"
#include "fusion/trainer.hpp"

namespace fusion::config {

using json = nlohmann::json;

struct DataSection {
  int episodes = 200;
  std::string split = "train";
  std::array<double, 3> policy_mix{0.4, 0.4, 0.2};
  double noise_aggressive = 0.25;
};

inline void to_json(json& j, const DataSection& d) {
  j = json{{"episodes", d.episodes},
           {"split", d.split},
           {"policy_mix", d.policy_mix},
           {"noise_aggressive", d.noise_aggressive}};
}
inline void from_json(const json& j, DataSection& d) {
  j.at("episodes").get_to(d.episodes);
  j.at("split").get_to(d.split);
  j.at("policy_mix").get_to(d.policy_mix);
  j.at("noise_aggressive").get_to(d.noise_aggressive);
}

struct RolloutSection {
  double cost_limit = 1.0;  // C0 = kappa_c
  int64_t max_steps = 1000;
  bool deterministic = true;
};

inline void to_json(json& j, const RolloutSection& r) {
  j = json{{"cost_limit", r.cost_limit},
           {"max_steps", r.max_steps},
           {"deterministic", r.deterministic}};
}
inline void from_json(const json& j, RolloutSection& r) {
  j.at("cost_limit").get_to(r.cost_limit);
  j.at("max_steps").get_to(r.max_steps);
  j.at("deterministic").get_to(r.deterministic);
}

struct RunConfig {
  env::EnvConfig env;
  DataSection data;
  model::ModelConfig model;
  cbl::BisimConfig bisim;
  train::TrainConfig trainer;
  RolloutSection rollout;
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"env", c.env},       {"data", c.data},       {"model", c.model},
           {"bisim", c.bisim},   {"trainer", c.trainer}, {"rollout", c.rollout}};
}
inline void from_json(const json& j, RunConfig& c) {
  j.at("env").get_to(c.env);
  j.at("data").get_to(c.data);
  j.at("model").get_to(c.model);
  j.at("bisim").get_to(c.bisim);
  j.at("trainer").get_to(c.trainer);
  j.at("rollout").get_to(c.rollout);
}

namespace detail {

inline void strict_merge(json& base, const json& patch, const std::string& path) {
  check(patch.is_object(), "config: expected an object at " + (path.empty() ? "top level" : path));
  for (const auto& [k, v] : patch.items()) {
    check(base.contains(k), "config: unknown key '" + path + k + "'");
    if (v.is_object() && base[k].is_object())
      strict_merge(base[k], v, path + k + ".");
    else
      base[k] = v;
  }
}

inline void apply_override(json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  check(eq != std::string::npos, "override must look like section.key=value: " + kv);
  const std::string key = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);
  json* node = &root;
  size_t pos = 0;
  while (true) {
    const size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot - pos);
    check(node->contains(part), "config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  if (node->is_number_integer() || node->is_number_unsigned())
    *node = static_cast<int64_t>(std::stoll(value));
  else if (node->is_number_float())
    *node = std::stod(value);
  else if (node->is_boolean())
    *node = (value == "true" || value == "1");
  else if (node->is_string())
    *node = value;
  else
    *node = json::parse(value);
}

}  // namespace detail

/// Loads defaults, merges an optional config file (strict: unknown keys are
/// rejected), then applies dotted-key overrides.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
  json base = RunConfig{};
  if (!path.empty()) {
    std::ifstream f(path);
    check(f.good(), "config: cannot open " + path);
    json file = json::parse(f, nullptr, /*allow_exceptions=*/true);
    detail::strict_merge(base, file, "");
  }
  for (const auto& kv : overrides) detail::apply_override(base, kv);
  return base.get<RunConfig>();
}

}  // namespace fusion::config
