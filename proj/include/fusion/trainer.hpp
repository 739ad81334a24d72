// SPDX-License-Identifier: Apache-2.0
//
// Offline training loop: a world-model update on the trajectory loss per
// step, alternated 1:1 with a bisimulation encoder update (unless ablated).
// Random streams are split per consumer (batching, pairing, dropout) so that
// toggling an ablation never shifts another consumer's draws.
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/cbl.hpp"
#include "fusion/checkpoint.hpp"
#include "fusion/dataset.hpp"
#include "fusion/model.hpp"
#include "fusion/optim.hpp"
#include "fusion/rollout.hpp"

namespace fusion::train {

using json = nlohmann::json;
namespace ad = fusion::ad;

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 6;
  double lr_model = 1e-3;
  double lr_encoder = 1e-3;
  double bisim_weight = 0.5;  // beta
  std::string ablation = "full";  // full | short | no_cewm | no_cbl
  int64_t short_context = 5;
  int64_t eval_interval = 1000;  // 0 disables in-training evaluation
  int64_t eval_episodes = 2;
  int64_t eval_max_steps = 600;
  double grad_clip = 1.0;
  uint64_t seed = 0;
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"lr_model", c.lr_model},
           {"lr_encoder", c.lr_encoder},
           {"bisim_weight", c.bisim_weight},
           {"ablation", c.ablation},
           {"short_context", c.short_context},
           {"eval_interval", c.eval_interval},
           {"eval_episodes", c.eval_episodes},
           {"eval_max_steps", c.eval_max_steps},
           {"grad_clip", c.grad_clip},
           {"seed", c.seed}};
}
inline void from_json(const json& j, TrainConfig& c) {
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_model").get_to(c.lr_model);
  j.at("lr_encoder").get_to(c.lr_encoder);
  j.at("bisim_weight").get_to(c.bisim_weight);
  j.at("ablation").get_to(c.ablation);
  j.at("short_context").get_to(c.short_context);
  j.at("eval_interval").get_to(c.eval_interval);
  j.at("eval_episodes").get_to(c.eval_episodes);
  j.at("eval_max_steps").get_to(c.eval_max_steps);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("seed").get_to(c.seed);
}

struct StepLosses {
  model::LossBreakdown traj;
  double bisim = 0;
  double total = 0;  // traj + beta * bisim
};

struct FitResult {
  std::string final_prefix;
  std::string best_prefix;
  double best_success = 0;
  std::vector<double> total_losses;  // per step
  double wall_clock_s = 0;
};

class Trainer {
 public:
  Trainer(const data::Dataset& ds, model::ModelConfig mcfg, cbl::BisimConfig bcfg,
          TrainConfig tcfg)
      : ds_(ds), mcfg_(mcfg), bcfg_(bcfg), tcfg_(tcfg) {
    check(tcfg_.steps > 0, "TrainConfig: steps must be positive");
    check(tcfg_.ablation == "full" || tcfg_.ablation == "short" ||
              tcfg_.ablation == "no_cewm" || tcfg_.ablation == "no_cbl",
          "TrainConfig: unknown ablation " + tcfg_.ablation);
    if (tcfg_.ablation == "short") mcfg_.context = tcfg_.short_context;
    if (tcfg_.ablation == "no_cewm") toggles_ = {false, false, true, false};
    net_ = std::make_unique<model::CewmModel>(mcfg_, store_, Rng(tcfg_.seed).fork("init"));
    std::vector<int> all_ids(store_.entries.size());
    for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = static_cast<int>(i);
    opt_model_ = ad::OptimState::make(store_, all_ids, tcfg_.lr_model);
    opt_enc_ = ad::OptimState::make(store_, net_->encoder_param_ids(), tcfg_.lr_encoder);
    rng_batch_ = Rng(tcfg_.seed).fork("batch");
    rng_pair_ = Rng(tcfg_.seed).fork("pair");
    rng_drop_ = Rng(tcfg_.seed).fork("dropout");
  }

  const model::CewmModel& net() const { return *net_; }
  const ad::ParamStore& store() const { return store_; }
  ad::ParamStore& store() { return store_; }
  int64_t step() const { return step_; }
  const model::ModelConfig& model_config() const { return mcfg_; }

  StepLosses train_step() {
    StepLosses out;
    data::WindowBatch wb = data::sample_windows(ds_, tcfg_.batch_size, mcfg_.context, rng_batch_);
    {
      ad::Tape t;
      auto params = ad::make_leaves(t, store_);
      model::ModelOutput mo = net_->forward(t, params, wb, true, &rng_drop_);
      auto [total, bd] = net_->traj_loss(t, mo, wb, toggles_);
      out.traj = bd;
      t.backward(total);
      std::vector<std::vector<double>*> bufs;
      std::vector<const std::vector<double>*> grads;
      for (size_t i = 0; i < params.size(); ++i) {
        bufs.push_back(&t.grad_buf(params[i].id));
        grads.push_back(bufs.back());
      }
      ad::clip_grad_norm(bufs, tcfg_.grad_clip);
      ad::adam_step(store_, grads, opt_model_);
    }
    if (tcfg_.ablation != "no_cbl")
      out.bisim = cbl::cbl_step(ds_, *net_, store_, opt_enc_, bcfg_, tcfg_.batch_size, rng_pair_,
                                tcfg_.grad_clip, tcfg_.bisim_weight);
    out.total = out.traj.total + tcfg_.bisim_weight * out.bisim;
    ++step_;
    return out;
  }

  void save(const std::string& prefix) const {
    json extra;
    extra["model"] = mcfg_;
    extra["bisim"] = bcfg_;
    extra["train"] = tcfg_;
    extra["env"] = ds_.manifest.env_cfg;
    extra["stats"] = ds_.manifest.stats;
    extra["step"] = step_;
    extra["best_success"] = best_success_;
    extra["rng"] = json{{"batch", rng_batch_.state()},
                        {"pair", rng_pair_.state()},
                        {"dropout", rng_drop_.state()}};
    ad::save_checkpoint(prefix, store_, extra, {&opt_model_, &opt_enc_});
  }

  /// Restores parameters, optimizer moments, RNG streams, and the step
  /// counter, so a resumed run reproduces the uninterrupted one exactly.
  void restore(const std::string& prefix) {
    json extra = ad::load_checkpoint(prefix, store_, {&opt_model_, &opt_enc_});
    step_ = extra.at("step");
    best_success_ = extra.at("best_success");
    rng_batch_.set_state(extra.at("rng").at("batch"));
    rng_pair_.set_state(extra.at("rng").at("pair"));
    rng_drop_.set_state(extra.at("rng").at("dropout"));
  }

  FitResult fit(const std::string& outdir, const std::string& resume_prefix = "") {
    namespace fs = std::filesystem;
    fs::create_directories(outdir);
    if (!resume_prefix.empty()) restore(resume_prefix);

    std::ofstream log(outdir + "/train_log.jsonl", step_ > 0 ? std::ios::app : std::ios::trunc);
    check(log.good(), "fit: cannot open train log in " + outdir);
    FitResult res;
    res.final_prefix = outdir + "/ckpt_final";
    res.best_prefix = outdir + "/ckpt_best";
    const auto t0 = std::chrono::steady_clock::now();

    while (step_ < tcfg_.steps) {
      StepLosses losses;
      try {
        losses = train_step();
        check(std::isfinite(losses.total), "non-finite loss");
      } catch (const std::exception& e) {
        json dump{{"step", step_},
                  {"error", e.what()},
                  {"l_rtg", losses.traj.rtg},
                  {"l_ctg", losses.traj.ctg},
                  {"l_act", losses.traj.act},
                  {"l_dyn", losses.traj.dyn},
                  {"l_bisim", losses.bisim}};
        std::ofstream(outdir + "/diagnostic_dump.json") << dump.dump(2) << "\n";
        throw Error("fit: aborted at step " + std::to_string(step_) + ": " + e.what());
      }
      res.total_losses.push_back(losses.total);
      log << json{{"step", step_},
                  {"l_total", losses.total},
                  {"l_rtg", losses.traj.rtg},
                  {"l_ctg", losses.traj.ctg},
                  {"l_act", losses.traj.act},
                  {"l_dyn", losses.traj.dyn},
                  {"l_bisim", losses.bisim}}
                 .dump()
          << "\n";

      if (tcfg_.eval_interval > 0 && step_ % tcfg_.eval_interval == 0) {
        const double success = eval_success_rate();
        log << json{{"step", step_}, {"eval_success_rate", success}}.dump() << "\n";
        if (success > best_success_) {
          best_success_ = success;
          save(res.best_prefix);
        }
      }
    }
    save(res.final_prefix);
    if (!fs::exists(res.best_prefix + ".json")) save(res.best_prefix);
    res.best_success = best_success_;
    res.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << json{{"final_step", step_}, {"wall_clock_s", res.wall_clock_s}}.dump() << "\n";
    return res;
  }

  rollout::RolloutConfig eval_rollout_config() const {
    rollout::RolloutConfig rc;
    rc.reward_target = ds_.manifest.stats.return_p90;
    rc.cost_limit = 1.0;
    rc.context = mcfg_.context;
    rc.max_steps = tcfg_.eval_max_steps;
    rc.deterministic = true;
    return rc;
  }

 private:
  double eval_success_rate() const {
    rollout::Runner runner(*net_, store_, ds_.manifest.stats);
    const uint64_t eval_seed = Rng(tcfg_.seed).fork("fit-eval").state();
    rollout::EvalReport rep = rollout::evaluate(runner, "policy", tcfg_.eval_episodes,
                                                {eval_seed}, ds_.manifest.env_cfg,
                                                eval_rollout_config());
    return rep.success_rate;
  }

  const data::Dataset& ds_;
  model::ModelConfig mcfg_;
  cbl::BisimConfig bcfg_;
  TrainConfig tcfg_;
  model::LossToggles toggles_;
  ad::ParamStore store_;
  std::unique_ptr<model::CewmModel> net_;
  ad::OptimState opt_model_, opt_enc_;
  Rng rng_batch_{0}, rng_pair_{0}, rng_drop_{0};
  int64_t step_ = 0;
  double best_success_ = -1.0;
};

/// A checkpoint rebuilt into a usable model + parameter store.
struct LoadedCheckpoint {
  model::ModelConfig model_cfg;
  cbl::BisimConfig bisim_cfg;
  TrainConfig train_cfg;
  env::EnvConfig env_cfg;
  data::NormStats stats;
  int64_t step = 0;
  ad::ParamStore store;
  std::unique_ptr<model::CewmModel> net;

  rollout::Runner runner() const { return rollout::Runner(*net, store, stats); }
};

inline LoadedCheckpoint load_model(const std::string& prefix) {
  json manifest = ad::load_checkpoint_manifest(prefix);
  const json& extra = manifest.at("extra");
  LoadedCheckpoint lc;
  extra.at("model").get_to(lc.model_cfg);
  extra.at("bisim").get_to(lc.bisim_cfg);
  extra.at("train").get_to(lc.train_cfg);
  extra.at("env").get_to(lc.env_cfg);
  extra.at("stats").get_to(lc.stats);
  lc.step = extra.at("step");
  lc.net = std::make_unique<model::CewmModel>(lc.model_cfg, lc.store, Rng(0));
  ad::load_checkpoint(prefix, lc.store);
  return lc;
}

}  // namespace fusion::train
