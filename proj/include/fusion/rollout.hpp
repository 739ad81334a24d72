// SPDX-License-Identifier: Apache-2.0
//
// Online inference and evaluation. Each environment step appends a
// provisional token group (subtraction-updated return/cost tokens), reads the
// value heads from the hidden states that precede those tokens, applies the
// max/min token updates, rewrites the tokens, and takes the action from a
// second forward. The window slides over the last H steps.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/checkpoint.hpp"
#include "fusion/dataset.hpp"
#include "fusion/env.hpp"
#include "fusion/model.hpp"

namespace fusion::rollout {

using json = nlohmann::json;
namespace ad = fusion::ad;

struct RolloutConfig {
  double reward_target = 0.0;  // R0, raw reward units
  double cost_limit = 1.0;     // C0 (the episodic constraint threshold)
  int64_t context = 20;        // H; must not exceed the model's trained context
  int64_t max_steps = 1000;
  bool deterministic = true;   // head mean if set, one Gaussian sample otherwise
};

inline void to_json(json& j, const RolloutConfig& c) {
  j = json{{"reward_target", c.reward_target},
           {"cost_limit", c.cost_limit},
           {"context", c.context},
           {"max_steps", c.max_steps},
           {"deterministic", c.deterministic}};
}
inline void from_json(const json& j, RolloutConfig& c) {
  j.at("reward_target").get_to(c.reward_target);
  j.at("cost_limit").get_to(c.cost_limit);
  j.at("context").get_to(c.context);
  j.at("max_steps").get_to(c.max_steps);
  j.at("deterministic").get_to(c.deterministic);
}

/// Token updates: rtg takes the max of the value prediction and the
/// subtraction update, ctg the min.
inline std::pair<double, double> update_tokens(double r_prev, double c_prev, double r_t,
                                               double c_t, double r_hat, double c_hat) {
  return {std::max(r_hat, r_prev - r_t), std::min(c_hat, c_prev - c_t)};
}

struct StepTrace {
  double reward = 0, cost = 0;
  double rtg_token = 0, ctg_token = 0;  // raw units, after the min/max update
  double accel = 0;
  int lane_cmd = 0;
  double v_kph = 0;
  bool collision = false, out_of_road = false;
};

struct EpisodeTrace {
  env::Context ctx;
  std::vector<StepTrace> steps;
  double total_reward = 0, total_cost = 0;
  env::Reason reason = env::Reason::running;
  bool success = false;
  int64_t max_window_steps = 0;
};

/// Binds a model, its parameters, and dataset statistics for inference.
class Runner {
 public:
  Runner(const model::CewmModel& m, const ad::ParamStore& store, data::NormStats stats)
      : model_(m), store_(store), stats_(stats) {}

  const data::NormStats& stats() const { return stats_; }
  const model::CewmModel& model() const { return model_; }

  EpisodeTrace run_episode(env::LaneworldEnv& sim, const env::Context& ctx,
                           const RolloutConfig& cfg, Rng rng,
                           model::AttentionEntropy* attn = nullptr) const {
    check(cfg.context >= 1 && cfg.context <= model_.config().context,
          "rollout context exceeds the model's trained context");

    struct WinStep {
      std::array<double, data::kActDim> act_prev{};
      double ctg_tok = 0, rtg_tok = 0;
      env::FactoredObservation obs;
      int64_t timestep = 0;
    };
    std::vector<WinStep> window;
    const double rtg_scale = stats_.rtg_scale();
    const double ctg_scale = stats_.ctg_scale();

    EpisodeTrace trace;
    trace.ctx = ctx;
    env::FactoredObservation obs = sim.reset(ctx);
    double r_tok = cfg.reward_target;
    double c_tok = cfg.cost_limit;
    env::Action action{};
    std::array<double, data::kActDim> act_norm{0.0, 0.0};

    // o <- {C0, R0, s0}; a0 <- pi(o)
    window.push_back({act_norm, c_tok / ctg_scale, r_tok / rtg_scale, obs, 0});
    action = predict_action(window, rng, cfg.deterministic, attn);

    const int64_t horizon = std::min<int64_t>(cfg.max_steps, sim.config().max_steps);
    for (int64_t t = 1; t <= horizon; ++t) {
      const env::StepOutcome out = sim.step(action);
      StepTrace st;
      st.reward = out.reward;
      st.cost = out.cost;
      st.accel = action.accel;
      st.lane_cmd = action.lane_cmd;
      st.v_kph = sim.ego().v * 3.6;
      st.collision = out.events.collision;
      st.out_of_road = out.events.out_of_road;
      trace.total_reward += out.reward;
      trace.total_cost += out.cost;

      if (out.done || t == horizon) {
        st.rtg_token = r_tok - out.reward;
        st.ctg_token = c_tok - out.cost;
        trace.steps.push_back(st);
        trace.reason = out.done ? out.reason : env::Reason::timeout;
        break;
      }

      // provisional step-t group with subtraction-updated tokens
      window.push_back({act_norm, (c_tok - out.cost) / ctg_scale,
                        (r_tok - out.reward) / rtg_scale, out.obs, t});
      if (static_cast<int64_t>(window.size()) > cfg.context)
        window.erase(window.begin());
      trace.max_window_steps =
          std::max<int64_t>(trace.max_window_steps, static_cast<int64_t>(window.size()));

      // value heads read the hidden states preceding the R/C tokens
      const auto [r_hat, c_hat] = predict_values(window);
      const auto [r_new, c_new] =
          update_tokens(r_tok, c_tok, out.reward, out.cost, r_hat, c_hat);
      r_tok = r_new;
      c_tok = c_new;
      window.back().rtg_tok = r_tok / rtg_scale;
      window.back().ctg_tok = c_tok / ctg_scale;

      action = predict_action(window, rng, cfg.deterministic, attn);
      act_norm = {action.accel / data::kAccelScale, double(action.lane_cmd)};

      st.rtg_token = r_tok;
      st.ctg_token = c_tok;
      trace.steps.push_back(st);
    }
    trace.success = trace.reason == env::Reason::goal;
    return trace;
  }

 private:
  template <class Window>
  data::WindowBatch to_batch(const Window& window) const {
    data::WindowBatch wb;
    wb.B = 1;
    wb.H = static_cast<int64_t>(window.size());
    const int64_t n = wb.H;
    wb.ego.resize(n * env::kEgoDim);
    wb.beam.resize(n * env::kBeamDim);
    wb.nav.resize(n * env::kNavDim);
    wb.act_prev.resize(n * data::kActDim);
    wb.rtg_tok.resize(n);
    wb.ctg_tok.resize(n);
    wb.timestep.resize(n);
    wb.pad.assign(n, 1.0);
    wb.act_tgt.assign(n * data::kActDim, 0.0);
    wb.rtg_tgt.assign(n, 0.0);
    wb.ctg_tgt.assign(n, 0.0);
    wb.ego_next.assign(n * env::kEgoDim, 0.0);
    wb.beam_next.assign(n * env::kBeamDim, 0.0);
    wb.nav_next.assign(n * env::kNavDim, 0.0);
    wb.dyn_valid.assign(n, 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const auto& s = window[i];
      for (int k = 0; k < env::kEgoDim; ++k) wb.ego[i * env::kEgoDim + k] = s.obs.ego[k];
      for (int k = 0; k < env::kBeamDim; ++k) wb.beam[i * env::kBeamDim + k] = s.obs.beam[k];
      for (int k = 0; k < env::kNavDim; ++k) wb.nav[i * env::kNavDim + k] = s.obs.nav[k];
      wb.act_prev[i * data::kActDim + 0] = s.act_prev[0];
      wb.act_prev[i * data::kActDim + 1] = s.act_prev[1];
      wb.rtg_tok[i] = s.rtg_tok;
      wb.ctg_tok[i] = s.ctg_tok;
      wb.timestep[i] = s.timestep;
    }
    return wb;
  }

  template <class Window>
  std::pair<double, double> predict_values(const Window& window) const {
    ad::Tape t(false);
    auto p = ad::make_leaves(t, store_);
    const data::WindowBatch wb = to_batch(window);
    model::ModelOutput out = model_.forward(t, p, wb);
    const int64_t last = wb.H - 1;
    const double r_hat = t.val(out.rtg.mu).at(last) * stats_.rtg_scale();
    const double c_hat = t.val(out.ctg.mu).at(last) * stats_.ctg_scale();
    return {r_hat, c_hat};
  }

  template <class Window>
  env::Action predict_action(const Window& window, Rng& rng, bool deterministic,
                             model::AttentionEntropy* attn) const {
    ad::Tape t(false);
    auto p = ad::make_leaves(t, store_);
    const data::WindowBatch wb = to_batch(window);
    model::ModelOutput out = model_.forward(t, p, wb, false, nullptr, attn != nullptr);
    if (attn) attn->add(out, wb, model_.config().heads);
    const int64_t last = wb.H - 1;
    double a0 = t.val(out.act.mu).at(last * data::kActDim + 0);
    double a1 = t.val(out.act.mu).at(last * data::kActDim + 1);
    if (!deterministic) {
      const auto sig = [&](int64_t k) {
        return std::exp(std::clamp(t.val(out.act.log_sigma).at(last * data::kActDim + k),
                                   ad::kLogSigmaMin, ad::kLogSigmaMax));
      };
      a0 += sig(0) * rng.normal();
      a1 += sig(1) * rng.normal();
    }
    env::Action act;
    act.accel = std::clamp(a0, -1.0, 1.0) * data::kAccelScale;
    act.lane_cmd = static_cast<int>(std::lround(std::clamp(a1, -1.0, 1.0)));
    return act;
  }

  const model::CewmModel& model_;
  const ad::ParamStore& store_;
  data::NormStats stats_;
};

// ---------------------------------------------------------------------------
// Safety categories and evaluation reports.
// ---------------------------------------------------------------------------

struct Categories {
  double ar = 0, ns = 0, it = 0, cf = 0, sl = 0;
};

inline void to_json(json& j, const Categories& c) {
  j = json{{"AR", c.ar}, {"NS", c.ns}, {"IT", c.it}, {"CF", c.cf}, {"SL", c.sl}};
}

/// AR: goal-reached fraction. NS: mean over episodes of the within-limit step
/// ratio. IT: completed within the 1000-step horizon. CF / SL: fraction of
/// episodes without collision / out-of-road events.
inline Categories safety_categories(const std::vector<EpisodeTrace>& traces,
                                    double v_limit_kph = 40.0) {
  check(!traces.empty(), "safety_categories: no traces");
  Categories cat;
  for (const auto& tr : traces) {
    const bool arrived = tr.reason == env::Reason::goal;
    cat.ar += arrived ? 1.0 : 0.0;
    cat.it += (arrived && static_cast<int64_t>(tr.steps.size()) <= env::kHardStepCap) ? 1.0 : 0.0;
    bool collided = false, off_road = false;
    int64_t under = 0;
    for (const auto& st : tr.steps) {
      collided = collided || st.collision;
      off_road = off_road || st.out_of_road;
      under += st.v_kph <= v_limit_kph ? 1 : 0;
    }
    cat.cf += collided ? 0.0 : 1.0;
    cat.sl += off_road ? 0.0 : 1.0;
    cat.ns += tr.steps.empty() ? 1.0 : double(under) / double(tr.steps.size());
  }
  const double n = double(traces.size());
  cat.ar /= n;
  cat.ns /= n;
  cat.it /= n;
  cat.cf /= n;
  cat.sl /= n;
  return cat;
}

struct EvalReport {
  std::string setting;  // "policy" | "dynamics"
  int64_t n_episodes = 0;
  std::vector<uint64_t> seeds;
  double density_multiplier = 1.0;
  RolloutConfig rollout;
  struct Episode {
    uint64_t seed = 0;
    int layout = 0;
    double reward = 0, cost = 0;
    bool success = false;
    std::string reason;
    int64_t steps = 0;
  };
  std::vector<Episode> episodes;
  double reward_mean = 0, reward_stderr = 0;
  double cost_mean = 0, cost_stderr = 0;
  double success_rate = 0;
  Categories categories;
  std::map<int, Categories> per_layout;

  json to_json() const {
    json eps = json::array();
    for (const auto& e : episodes)
      eps.push_back({{"seed", e.seed},
                     {"layout", e.layout},
                     {"reward", e.reward},
                     {"cost", e.cost},
                     {"success", e.success},
                     {"reason", e.reason},
                     {"steps", e.steps}});
    json lay = json::object();
    for (const auto& [k, v] : per_layout) lay[std::to_string(k)] = v;
    return json{{"setting", setting},
                {"n_episodes", n_episodes},
                {"seeds", seeds},
                {"density_multiplier", density_multiplier},
                {"rollout", rollout},
                {"episodes", eps},
                {"aggregate",
                 {{"reward_mean", reward_mean},
                  {"reward_stderr", reward_stderr},
                  {"cost_mean", cost_mean},
                  {"cost_stderr", cost_stderr},
                  {"success_rate", success_rate}}},
                {"categories", categories},
                {"per_layout", lay}};
  }

  /// Radar-plot-ready CSV: one row per layout plus the overall row.
  std::string to_radar_csv() const {
    std::string csv = "layout,AR,NS,IT,CF,SL\n";
    auto row = [&](const std::string& name, const Categories& c) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(), c.ar, c.ns,
                    c.it, c.cf, c.sl);
      csv += buf;
    };
    for (const auto& [k, v] : per_layout) row(make_layout(k).name, v);
    row("overall", categories);
    return csv;
  }

 private:
  static env::RoadLayout make_layout(int id) { return env::make_layout(id); }
};

/// Evaluates a policy over n_episodes x seeds. The policy setting draws
/// train-split contexts; the dynamics setting draws test-split contexts
/// (held-out layouts, 1.5x density).
inline EvalReport evaluate(const Runner& runner, const std::string& setting, int64_t n_episodes,
                           const std::vector<uint64_t>& seeds, const env::EnvConfig& env_cfg,
                           const RolloutConfig& cfg,
                           std::vector<EpisodeTrace>* traces_out = nullptr,
                           model::AttentionEntropy* attn = nullptr) {
  check(setting == "policy" || setting == "dynamics", "unknown evaluation setting: " + setting);
  const env::Split split = setting == "policy" ? env::Split::train : env::Split::test;

  EvalReport rep;
  rep.setting = setting;
  rep.n_episodes = n_episodes;
  rep.seeds = seeds;
  rep.density_multiplier = setting == "dynamics" ? env_cfg.test_density_multiplier : 1.0;
  rep.rollout = cfg;

  env::LaneworldEnv sim(env_cfg);
  std::vector<EpisodeTrace> traces;
  std::map<int, std::vector<EpisodeTrace>> by_layout;
  for (uint64_t seed : seeds) {
    Rng seed_rng = Rng(seed).fork("eval");
    for (int64_t i = 0; i < n_episodes; ++i) {
      Rng ep_rng = seed_rng.fork(uint64_t(i));
      const env::Context ctx = env::sample_context(split, ep_rng.next_u64(), env_cfg);
      EpisodeTrace tr = runner.run_episode(sim, ctx, cfg, ep_rng.fork("action"), attn);
      EvalReport::Episode e;
      e.seed = seed;
      e.layout = ctx.layout_id;
      e.reward = tr.total_reward;
      e.cost = tr.total_cost;
      e.success = tr.success;
      e.reason = env::to_string(tr.reason);
      e.steps = static_cast<int64_t>(tr.steps.size());
      rep.episodes.push_back(e);
      by_layout[ctx.layout_id].push_back(tr);
      traces.push_back(std::move(tr));
    }
  }

  const double n = double(traces.size());
  double rs = 0, rsq = 0, cs = 0, csq = 0;
  for (const auto& e : rep.episodes) {
    rs += e.reward;
    rsq += e.reward * e.reward;
    cs += e.cost;
    csq += e.cost * e.cost;
    rep.success_rate += e.success ? 1.0 : 0.0;
  }
  rep.reward_mean = rs / n;
  rep.cost_mean = cs / n;
  rep.success_rate /= n;
  if (n > 1) {
    rep.reward_stderr =
        std::sqrt(std::max(0.0, rsq / n - rep.reward_mean * rep.reward_mean) / (n - 1));
    rep.cost_stderr = std::sqrt(std::max(0.0, csq / n - rep.cost_mean * rep.cost_mean) / (n - 1));
  }
  rep.categories = safety_categories(traces, env_cfg.cost_w.v_limit_kph);
  for (const auto& [k, v] : by_layout) rep.per_layout[k] = safety_categories(v, env_cfg.cost_w.v_limit_kph);
  if (traces_out) *traces_out = std::move(traces);
  return rep;
}

/// Trace dump for the analysis tooling (JSONL, one episode per line).
inline std::string traces_to_jsonl(const std::vector<EpisodeTrace>& traces) {
  std::string out;
  for (const auto& tr : traces) {
    json steps = json::array();
    for (const auto& st : tr.steps)
      steps.push_back({{"r", st.reward},
                       {"c", st.cost},
                       {"rtg", st.rtg_token},
                       {"ctg", st.ctg_token},
                       {"v_kph", st.v_kph},
                       {"accel", st.accel},
                       {"lane_cmd", st.lane_cmd}});
    out += json{{"layout", tr.ctx.layout_id},
                {"seed", tr.ctx.seed},
                {"reason", env::to_string(tr.reason)},
                {"reward", tr.total_reward},
                {"cost", tr.total_cost},
                {"steps", steps}}
               .dump();
    out += '\n';
  }
  return out;
}

/// Mean attention entropy per layer over n_episodes trajectories.
inline std::vector<double> attention_entropy(const Runner& runner, const std::string& setting,
                                             int64_t n_episodes, uint64_t seed,
                                             const env::EnvConfig& env_cfg,
                                             const RolloutConfig& cfg) {
  model::AttentionEntropy acc;
  evaluate(runner, setting, n_episodes, {seed}, env_cfg, cfg, nullptr, &acc);
  return acc.per_layer();
}

}  // namespace fusion::rollout
