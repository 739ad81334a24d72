// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: collect / train / eval / analyze-attention.
// Exit codes: 0 success, 2 flag or config errors, 1 runtime errors. Every run
// directory receives the resolved configuration before execution.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusion/dataset.hpp"
#include "fusion/rollout.hpp"
#include "fusion/runconfig.hpp"
#include "fusion/trainer.hpp"

namespace fusion::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

namespace detail {

inline std::string default_out(const std::string& subcommand) {
  const char* root = std::getenv("FUSION_RUN_DIR");
  return (root && *root ? std::string(root) : std::string("runs")) + "/" + subcommand;
}

inline config::RunConfig load_config_or_die(const std::string& path,
                                            const std::vector<std::string>& sets) {
  try {
    return config::load_run_config(path, sets);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

inline std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> seeds;
  size_t pos = 0;
  try {
    while (pos < csv.size()) {
      size_t comma = csv.find(',', pos);
      if (comma == std::string::npos) comma = csv.size();
      seeds.push_back(std::stoull(csv.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  } catch (const std::exception&) {
    throw ConfigError("--seeds expects a comma-separated integer list, got: " + csv);
  }
  if (seeds.empty()) throw ConfigError("--seeds expects at least one seed");
  return seeds;
}

inline void write_run_header(const std::string& out, const std::string& command,
                             const config::RunConfig& rc, const json& inputs) {
  fs::create_directories(out);
  json header{{"version", kVersion}, {"command", command}, {"config", rc}, {"inputs", inputs}};
  std::ofstream f(out + "/config.json");
  check(f.good(), "cannot write " + out + "/config.json");
  f << header.dump(2) << "\n";
}

inline uint32_t file_crc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) return 0;
  std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return crc32(body);
}

inline std::string map_ablation(std::string a) {
  for (auto& ch : a)
    if (ch == '-') ch = '_';
  return a;
}

// ---------------------------------------------------------------------------

inline int run_collect(const std::string& config_path, std::string out, int episodes,
                       uint64_t seed, const std::string& split,
                       const std::vector<std::string>& sets) {
  config::RunConfig rc = load_config_or_die(config_path, sets);
  if (episodes > 0) rc.data.episodes = episodes;
  rc.data.split = split;
  if (out.empty()) out = default_out("collect");

  data::CollectConfig cc;
  cc.episodes = rc.data.episodes;
  cc.split = env::parse_split(rc.data.split);
  cc.policy_mix = rc.data.policy_mix;
  cc.noise_aggressive = rc.data.noise_aggressive;
  cc.seed = seed;
  cc.env_cfg = rc.env;

  write_run_header(out, "collect", rc, {{"seed", seed}});
  data::Dataset ds = data::collect(cc);
  data::save(ds, out);
  std::cout << "collected " << ds.manifest.episode_count << " episodes ("
            << ds.manifest.total_steps << " steps) into " << out << "\n";
  return 0;
}

inline int run_train(const std::string& config_path, const std::string& data_dir,
                     std::string out, const std::string& ablation, int64_t seed,
                     int64_t steps, const std::string& resume,
                     const std::vector<std::string>& sets) {
  config::RunConfig rc = load_config_or_die(config_path, sets);
  if (!ablation.empty()) rc.trainer.ablation = map_ablation(ablation);
  if (seed >= 0) rc.trainer.seed = static_cast<uint64_t>(seed);
  if (steps > 0) rc.trainer.steps = steps;
  if (out.empty()) out = default_out("train");

  data::Dataset ds = data::load(data_dir);
  write_run_header(out, "train", rc,
                   {{"dataset_dir", data_dir},
                    {"dataset_crc32", ds.manifest.crc32_episodes},
                    {"resume", resume}});
  train::Trainer trainer(ds, rc.model, rc.bisim, rc.trainer);
  train::FitResult res = trainer.fit(out, resume);
  std::cout << "trained " << trainer.step() << " steps in " << res.wall_clock_s
            << " s; final checkpoint " << res.final_prefix << "\n";
  return 0;
}

inline int run_eval(const std::string& checkpoint, const std::string& setting,
                    int64_t episodes, const std::string& seeds_csv, std::string out,
                    const std::string& config_path, const std::vector<std::string>& sets) {
  if (setting != "policy" && setting != "dynamics")
    throw ConfigError("--setting must be policy or dynamics, got: " + setting);
  const std::vector<uint64_t> seeds = parse_seeds(seeds_csv);
  config::RunConfig rc = load_config_or_die(config_path, sets);
  if (out.empty()) out = default_out("eval");

  train::LoadedCheckpoint lc = train::load_model(checkpoint);
  rollout::RolloutConfig rcfg;
  rcfg.reward_target = lc.stats.return_p90;
  rcfg.cost_limit = rc.rollout.cost_limit;
  rcfg.context = lc.model_cfg.context;
  rcfg.max_steps = rc.rollout.max_steps;
  rcfg.deterministic = rc.rollout.deterministic;

  rc.env = lc.env_cfg;  // evaluation always runs the checkpoint's environment
  write_run_header(out, "eval", rc,
                   {{"checkpoint", checkpoint},
                    {"checkpoint_crc32", file_crc(checkpoint + ".bin")},
                    {"setting", setting},
                    {"seeds", seeds}});

  rollout::Runner runner = lc.runner();
  std::vector<rollout::EpisodeTrace> traces;
  rollout::EvalReport rep =
      rollout::evaluate(runner, setting, episodes, seeds, lc.env_cfg, rcfg, &traces);
  {
    std::ofstream f(out + "/eval_report.json");
    f << rep.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(out + "/radar.csv");
    f << rep.to_radar_csv();
  }
  {
    std::ofstream f(out + "/traces.jsonl");
    f << rollout::traces_to_jsonl(traces);
  }
  std::cout << "eval " << setting << ": reward " << rep.reward_mean << " +- "
            << rep.reward_stderr << ", cost " << rep.cost_mean << " +- " << rep.cost_stderr
            << ", success " << rep.success_rate << " (" << rep.episodes.size()
            << " episodes) -> " << out << "\n";
  return 0;
}

inline int run_analyze_attention(const std::string& checkpoint, int64_t episodes, uint64_t seed,
                                 const std::string& setting, std::string out,
                                 const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  config::RunConfig rc = load_config_or_die(config_path, sets);
  if (out.empty()) out = default_out("analyze-attention");

  train::LoadedCheckpoint lc = train::load_model(checkpoint);
  rollout::RolloutConfig rcfg;
  rcfg.reward_target = lc.stats.return_p90;
  rcfg.cost_limit = rc.rollout.cost_limit;
  rcfg.context = lc.model_cfg.context;
  rcfg.max_steps = rc.rollout.max_steps;

  rc.env = lc.env_cfg;
  write_run_header(out, "analyze-attention", rc,
                   {{"checkpoint", checkpoint},
                    {"checkpoint_crc32", file_crc(checkpoint + ".bin")},
                    {"episodes", episodes},
                    {"seed", seed}});

  rollout::Runner runner = lc.runner();
  model::AttentionStats acc;
  acc.map_tokens = model::kTokensPerStep * lc.model_cfg.context;
  rollout::evaluate(runner, setting, episodes, {seed}, lc.env_cfg, rcfg, nullptr, &acc);
  const std::vector<double> layers = acc.per_layer();
  double overall = 0;
  for (double v : layers) overall += v;
  if (!layers.empty()) overall /= double(layers.size());
  json result{{"per_layer_entropy", layers},
              {"mean_entropy", overall},
              {"mean_attention", acc.maps_json()},
              {"episodes", episodes},
              {"setting", setting},
              {"checkpoint", checkpoint}};
  std::ofstream f(out + "/attention_entropy.json");
  f << result.dump(2) << "\n";
  std::cout << result.dump() << "\n";
  return 0;
}

}  // namespace detail

inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"fusion: safety-aware offline RL for lane-world driving"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, checkpoint, resume;
  std::string setting = "policy", ablation, split = "train", seeds_csv = "0";
  int episodes = -1;
  int64_t train_seed = -1, train_steps = -1, eval_episodes = 20, attn_episodes = 30;
  uint64_t seed = 0;
  std::vector<std::string> sets;

  auto* collect = app.add_subcommand("collect", "Collect an offline dataset");
  collect->add_option("--config", config_path, "run config JSON");
  collect->add_option("--out", out, "output dataset directory");
  collect->add_option("--episodes", episodes, "number of episodes");
  collect->add_option("--seed", seed, "collection seed");
  collect->add_option("--split", split, "context split")
      ->check(CLI::IsMember({"train", "test"}));
  collect->add_option("--set", sets, "dotted-key config override (key=value)");

  auto* train_cmd = app.add_subcommand("train", "Train on a collected dataset");
  train_cmd->add_option("--config", config_path, "run config JSON");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out, "run directory");
  train_cmd->add_option("--ablation", ablation, "model variant")
      ->check(CLI::IsMember({"full", "short", "no-cewm", "no-cbl"}));
  train_cmd->add_option("--seed", train_seed, "training seed");
  train_cmd->add_option("--steps", train_steps, "training steps");
  train_cmd->add_option("--resume", resume, "checkpoint prefix to resume from");
  train_cmd->add_option("--set", sets, "dotted-key config override (key=value)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
  eval_cmd->add_option("--setting", setting, "policy | dynamics")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "episodes per seed");
  eval_cmd->add_option("--seeds", seeds_csv, "comma-separated seeds");
  eval_cmd->add_option("--out", out, "report directory");
  eval_cmd->add_option("--config", config_path, "run config JSON");
  eval_cmd->add_option("--set", sets, "dotted-key config override (key=value)");

  auto* attn = app.add_subcommand("analyze-attention", "Per-layer attention entropy");
  attn->add_option("--checkpoint", checkpoint, "checkpoint prefix")->required();
  attn->add_option("--episodes", attn_episodes, "trajectories to average");
  attn->add_option("--seed", seed, "evaluation seed");
  attn->add_option("--setting", setting, "policy | dynamics");
  attn->add_option("--out", out, "output directory");
  attn->add_option("--config", config_path, "run config JSON");
  attn->add_option("--set", sets, "dotted-key config override (key=value)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand(collect))
      return detail::run_collect(config_path, out, episodes, seed, split, sets);
    if (app.got_subcommand(train_cmd))
      return detail::run_train(config_path, data_dir, out, ablation, train_seed, train_steps,
                               resume, sets);
    if (app.got_subcommand(eval_cmd))
      return detail::run_eval(checkpoint, setting, eval_episodes, seeds_csv, out, config_path,
                              sets);
    if (app.got_subcommand(attn))
      return detail::run_analyze_attention(checkpoint, attn_episodes, seed, setting, out,
                                           config_path, sets);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("fusion");
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fusion::cli
