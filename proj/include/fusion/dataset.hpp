// SPDX-License-Identifier: Apache-2.0
//
// Offline corpus: collection with scripted policies, undiscounted
// return/cost-to-go annotation, JSONL storage with CRC32 integrity, and
// windowed batching for sequence training.
#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/common.hpp"
#include "fusion/env.hpp"
#include "fusion/policy.hpp"

namespace fusion::data {

using json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "fusion-dataset-v1";
inline constexpr int kActDim = 2;
inline constexpr double kAccelScale = 4.0;  // action range is [-4, 4] m/s^2

struct EpisodeRecord {
  env::Context context;
  std::string profile;
  std::vector<std::array<double, env::kEgoDim>> ego;
  std::vector<std::array<double, env::kBeamDim>> beam;
  std::vector<std::array<double, env::kNavDim>> nav;
  std::vector<std::array<double, kActDim>> act;  // raw (accel m/s^2, lane_cmd)
  std::vector<double> reward, cost;
  std::vector<double> rtg, ctg;  // undiscounted suffix sums
  env::Reason reason = env::Reason::running;

  size_t length() const { return reward.size(); }
  double episode_return() const { return rtg.empty() ? 0.0 : rtg.front(); }
  double episode_cost() const { return ctg.empty() ? 0.0 : ctg.front(); }
};

/// Annotates undiscounted returns-to-go and costs-to-go in place:
/// R_t = r_t + R_{t+1}, R_T = r_T (same law for costs).
inline void annotate_returns(EpisodeRecord& ep) {
  const size_t n = ep.reward.size();
  check(ep.cost.size() == n, "annotate_returns: reward/cost length mismatch");
  ep.rtg.assign(n, 0.0);
  ep.ctg.assign(n, 0.0);
  double r = 0, c = 0;
  for (size_t i = n; i-- > 0;) {
    r += ep.reward[i];
    c += ep.cost[i];
    ep.rtg[i] = r;
    ep.ctg[i] = c;
  }
}

struct NormStats {
  double reward_mean = 0, reward_std = 1;
  double cost_mean = 0, cost_std = 1;
  double rtg_abs_max = 1, ctg_abs_max = 1;
  double return_p90 = 0;

  double rtg_scale() const { return std::max(1.0, rtg_abs_max); }
  double ctg_scale() const { return std::max(1.0, ctg_abs_max); }
};

inline void to_json(json& j, const NormStats& s) {
  j = json{{"reward_mean", s.reward_mean}, {"reward_std", s.reward_std},
           {"cost_mean", s.cost_mean},     {"cost_std", s.cost_std},
           {"rtg_abs_max", s.rtg_abs_max}, {"ctg_abs_max", s.ctg_abs_max},
           {"return_p90", s.return_p90}};
}
inline void from_json(const json& j, NormStats& s) {
  j.at("reward_mean").get_to(s.reward_mean);
  j.at("reward_std").get_to(s.reward_std);
  j.at("cost_mean").get_to(s.cost_mean);
  j.at("cost_std").get_to(s.cost_std);
  j.at("rtg_abs_max").get_to(s.rtg_abs_max);
  j.at("ctg_abs_max").get_to(s.ctg_abs_max);
  j.at("return_p90").get_to(s.return_p90);
}

struct Manifest {
  std::string schema = kSchemaVersion;
  std::string split = "train";
  int64_t episode_count = 0;
  int64_t total_steps = 0;
  std::map<int, int64_t> layout_hist;
  NormStats stats;
  uint32_t crc32_episodes = 0;
  uint32_t crc32_layouts = 0;
  uint64_t seed = 0;
  std::array<double, 3> policy_mix{0.4, 0.4, 0.2};
  double noise_aggressive = 0.25;
  env::EnvConfig env_cfg;
};

/// Recomputes normalization statistics from raw per-step arrays.
inline NormStats compute_stats(const std::vector<EpisodeRecord>& episodes) {
  NormStats s;
  double rsum = 0, rsq = 0, csum = 0, csq = 0;
  int64_t n = 0;
  std::vector<double> returns;
  for (const auto& ep : episodes) {
    returns.push_back(ep.episode_return());
    for (size_t i = 0; i < ep.length(); ++i) {
      rsum += ep.reward[i];
      rsq += ep.reward[i] * ep.reward[i];
      csum += ep.cost[i];
      csq += ep.cost[i] * ep.cost[i];
      s.rtg_abs_max = std::max(s.rtg_abs_max, std::fabs(ep.rtg[i]));
      s.ctg_abs_max = std::max(s.ctg_abs_max, std::fabs(ep.ctg[i]));
      ++n;
    }
  }
  if (n > 0) {
    s.reward_mean = rsum / n;
    s.reward_std = std::sqrt(std::max(0.0, rsq / n - s.reward_mean * s.reward_mean));
    s.cost_mean = csum / n;
    s.cost_std = std::sqrt(std::max(0.0, csq / n - s.cost_mean * s.cost_mean));
  }
  if (!returns.empty()) {
    std::sort(returns.begin(), returns.end());
    const size_t k = (returns.size() * 9 + 9) / 10;  // nearest-rank ceil(0.9 n)
    s.return_p90 = returns[std::min(returns.size() - 1, k - 1)];
  }
  return s;
}

struct Dataset {
  Manifest manifest;
  std::vector<EpisodeRecord> episodes;

  int64_t total_steps() const {
    int64_t n = 0;
    for (const auto& ep : episodes) n += static_cast<int64_t>(ep.length());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Collection.
// ---------------------------------------------------------------------------

struct CollectConfig {
  int episodes = 200;
  env::Split split = env::Split::train;
  std::array<double, 3> policy_mix{0.4, 0.4, 0.2};  // timid / normal / aggressive
  double noise_aggressive = 0.25;
  uint64_t seed = 0;
  env::EnvConfig env_cfg;
};

inline EpisodeRecord run_scripted_episode(env::LaneworldEnv& env, const env::Context& ctx,
                                          int profile_idx, double noise, Rng rng) {
  EpisodeRecord ep;
  ep.context = ctx;
  const auto& params = env.config().profiles[profile_idx];
  ep.profile = params.label;
  env::FactoredObservation obs = env.reset(ctx);
  env::FactoredObservation prev = obs;
  bool first = true;
  bool done = false;
  while (!done) {
    const env::Action a =
        policy::act(obs, first ? nullptr : &prev, params, noise, rng, env.config());
    const env::StepOutcome out = env.step(a);
    ep.ego.push_back(obs.ego);
    ep.beam.push_back(obs.beam);
    ep.nav.push_back(obs.nav);
    ep.act.push_back({a.accel, double(a.lane_cmd)});
    ep.reward.push_back(out.reward);
    ep.cost.push_back(out.cost);
    prev = obs;
    obs = out.obs;
    first = false;
    done = out.done;
    ep.reason = out.reason;
  }
  annotate_returns(ep);
  return ep;
}

inline Dataset collect(const CollectConfig& cfg) {
  Dataset ds;
  env::LaneworldEnv sim(cfg.env_cfg);
  Rng root = Rng(cfg.seed).fork("collect");
  std::vector<double> mix(cfg.policy_mix.begin(), cfg.policy_mix.end());
  for (int i = 0; i < cfg.episodes; ++i) {
    Rng ep_rng = root.fork(uint64_t(i));
    const env::Context ctx = env::sample_context(cfg.split, ep_rng.next_u64(), cfg.env_cfg);
    const int profile_idx = ep_rng.categorical(mix);
    const double noise = profile_idx == 2 ? cfg.noise_aggressive : 0.0;
    ds.episodes.push_back(
        run_scripted_episode(sim, ctx, profile_idx, noise, ep_rng.fork("policy")));
  }
  ds.manifest.split = cfg.split == env::Split::train ? "train" : "test";
  ds.manifest.episode_count = cfg.episodes;
  ds.manifest.total_steps = ds.total_steps();
  for (const auto& ep : ds.episodes) ds.manifest.layout_hist[ep.context.layout_id]++;
  ds.manifest.stats = compute_stats(ds.episodes);
  ds.manifest.seed = cfg.seed;
  ds.manifest.policy_mix = cfg.policy_mix;
  ds.manifest.noise_aggressive = cfg.noise_aggressive;
  ds.manifest.env_cfg = cfg.env_cfg;
  return ds;
}

// ---------------------------------------------------------------------------
// Storage: <dir>/manifest.json + <dir>/episodes.jsonl (+ layouts.json).
// ---------------------------------------------------------------------------

namespace detail {

inline json episode_to_json(const EpisodeRecord& ep) {
  json j;
  j["layout"] = ep.context.layout_id;
  j["density"] = ep.context.traffic_density;
  j["mix"] = ep.context.aggressiveness_mix;
  j["seed"] = ep.context.seed;
  j["profile"] = ep.profile;
  j["reason"] = env::to_string(ep.reason);
  auto dump_blocks = [&](const char* key, const auto& rows) {
    json arr = json::array();
    for (const auto& row : rows) arr.push_back(row);
    j[key] = std::move(arr);
  };
  dump_blocks("ego", ep.ego);
  dump_blocks("beam", ep.beam);
  dump_blocks("nav", ep.nav);
  dump_blocks("act", ep.act);
  j["rew"] = ep.reward;
  j["cost"] = ep.cost;
  j["rtg"] = ep.rtg;
  j["ctg"] = ep.ctg;
  return j;
}

inline EpisodeRecord episode_from_json(const json& j) {
  EpisodeRecord ep;
  ep.context.layout_id = j.at("layout");
  ep.context.traffic_density = j.at("density");
  j.at("mix").get_to(ep.context.aggressiveness_mix);
  ep.context.seed = j.at("seed");
  ep.profile = j.at("profile");
  ep.reason = env::reason_from_string(j.at("reason"));
  auto load_blocks = [&](const char* key, auto& rows) {
    for (const auto& row : j.at(key)) {
      typename std::remove_reference_t<decltype(rows)>::value_type r;
      check(row.size() == r.size(), "dataset: block width mismatch");
      for (size_t k = 0; k < r.size(); ++k) r[k] = row[k];
      rows.push_back(r);
    }
  };
  load_blocks("ego", ep.ego);
  load_blocks("beam", ep.beam);
  load_blocks("nav", ep.nav);
  load_blocks("act", ep.act);
  j.at("rew").get_to(ep.reward);
  j.at("cost").get_to(ep.cost);
  j.at("rtg").get_to(ep.rtg);
  j.at("ctg").get_to(ep.ctg);
  return ep;
}

inline json manifest_to_json(const Manifest& m) {
  json hist = json::object();
  for (const auto& [k, v] : m.layout_hist) hist[std::to_string(k)] = v;
  return json{{"schema", m.schema},
              {"split", m.split},
              {"episodes", m.episode_count},
              {"steps", m.total_steps},
              {"layout_hist", hist},
              {"stats", m.stats},
              {"crc32_episodes", m.crc32_episodes},
              {"crc32_layouts", m.crc32_layouts},
              {"seed", m.seed},
              {"policy_mix", m.policy_mix},
              {"noise_aggressive", m.noise_aggressive},
              {"env", m.env_cfg}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.schema = j.at("schema");
  check(m.schema == kSchemaVersion,
        "dataset: schema version mismatch (got " + m.schema + ")");
  m.split = j.at("split");
  m.episode_count = j.at("episodes");
  m.total_steps = j.at("steps");
  for (const auto& [k, v] : j.at("layout_hist").items())
    m.layout_hist[std::stoi(k)] = v.get<int64_t>();
  j.at("stats").get_to(m.stats);
  m.crc32_episodes = j.at("crc32_episodes");
  m.crc32_layouts = j.value("crc32_layouts", 0u);
  m.seed = j.at("seed");
  j.at("policy_mix").get_to(m.policy_mix);
  m.noise_aggressive = j.at("noise_aggressive");
  j.at("env").get_to(m.env_cfg);
  return m;
}

}  // namespace detail

inline void save(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string epath = dir + "/episodes.jsonl";
  const std::string mpath = dir + "/manifest.json";
  try {
    std::string body;
    for (const auto& ep : ds.episodes) {
      body += detail::episode_to_json(ep).dump();
      body += '\n';
    }
    Manifest m = ds.manifest;
    m.crc32_episodes = crc32(body);
    const std::string layouts =
        env::layout_registry_json(ds.manifest.env_cfg).dump(2) + "\n";
    m.crc32_layouts = crc32(layouts);
    {
      std::ofstream ef(epath, std::ios::binary);
      check(ef.good(), "dataset: cannot open " + epath);
      ef << body;
      check(ef.good(), "dataset: episode write failed");
    }
    {
      std::ofstream mf(mpath);
      check(mf.good(), "dataset: cannot open " + mpath);
      mf << detail::manifest_to_json(m).dump(2) << "\n";
      check(mf.good(), "dataset: manifest write failed");
    }
    std::ofstream lf(dir + "/layouts.json");
    lf << layouts;
  } catch (...) {
    std::remove(epath.c_str());
    std::remove(mpath.c_str());
    throw;
  }
}

inline Dataset load(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  check(mf.good(), "dataset: missing manifest.json in " + dir);
  Dataset ds;
  ds.manifest = detail::manifest_from_json(json::parse(mf));

  std::ifstream ef(dir + "/episodes.jsonl", std::ios::binary);
  check(ef.good(), "dataset: missing episodes.jsonl in " + dir);
  std::string body((std::istreambuf_iterator<char>(ef)), std::istreambuf_iterator<char>());
  check(crc32(body) == ds.manifest.crc32_episodes,
        "dataset: checksum failure in episodes.jsonl");
  if (std::ifstream lf(dir + "/layouts.json", std::ios::binary); lf.good()) {
    std::string lbody((std::istreambuf_iterator<char>(lf)), std::istreambuf_iterator<char>());
    if (ds.manifest.crc32_layouts != 0)
      check(crc32(lbody) == ds.manifest.crc32_layouts,
            "dataset: checksum failure in layouts.json");
  }

  size_t pos = 0;
  while (pos < body.size()) {
    size_t end = body.find('\n', pos);
    if (end == std::string::npos) end = body.size();
    if (end > pos) ds.episodes.push_back(detail::episode_from_json(json::parse(
        body.substr(pos, end - pos))));
    pos = end + 1;
  }
  check(static_cast<int64_t>(ds.episodes.size()) == ds.manifest.episode_count,
        "dataset: episode count mismatch");

  // suffix-sum law holds for every stored episode
  for (const auto& ep : ds.episodes) {
    const size_t n = ep.length();
    check(ep.rtg.size() == n && ep.ctg.size() == n && ep.ego.size() == n &&
              ep.act.size() == n,
          "dataset: array length mismatch");
    for (size_t t = 0; t < n; ++t) {
      const double rn = t + 1 < n ? ep.rtg[t + 1] : 0.0;
      const double cn = t + 1 < n ? ep.ctg[t + 1] : 0.0;
      check(ep.rtg[t] == ep.reward[t] + rn, "dataset: rtg suffix law violated");
      check(ep.ctg[t] == ep.cost[t] + cn, "dataset: ctg suffix law violated");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Windowed batching.
// ---------------------------------------------------------------------------

/// Length-H token windows ending at sampled positions; positions before the
/// episode start are left-padded (pad = 0) and masked out of every loss.
struct WindowBatch {
  int64_t B = 0, H = 0;
  std::vector<double> ego, beam, nav;          // [B*H, dim], raw [0,1] blocks
  std::vector<double> act_prev;                // [B*H, 2], normalized a_{t-1}
  std::vector<double> rtg_tok, ctg_tok;        // [B*H], normalized return tokens
  std::vector<int64_t> timestep;               // [B*H], global episode step
  std::vector<double> pad;                     // [B*H], 1 = real
  std::vector<double> act_tgt;                 // [B*H, 2]
  std::vector<double> rtg_tgt, ctg_tgt;        // [B*H]
  std::vector<double> ego_next, beam_next, nav_next;  // [B*H, dim]
  std::vector<double> dyn_valid;               // [B*H], 1 if step t+1 exists
};

/// Transitions for bisimulation pairing: states, the actions taken in them,
/// raw rewards/costs, and the tokens needed to query the dynamics heads.
struct TransitionBatch {
  int64_t N = 0;
  std::vector<double> ego, beam, nav;    // [N, dim]
  std::vector<double> act;               // [N, 2] normalized a_t
  std::vector<double> reward, cost;      // [N] raw
  std::vector<double> act_prev;          // [N, 2] normalized a_{t-1}
  std::vector<double> rtg_tok, ctg_tok;  // [N]
  std::vector<int64_t> timestep;         // [N]
};

namespace detail {

inline std::pair<int, int> locate(const Dataset& ds, int64_t flat) {
  for (size_t e = 0; e < ds.episodes.size(); ++e) {
    const int64_t len = static_cast<int64_t>(ds.episodes[e].length());
    if (flat < len) return {static_cast<int>(e), static_cast<int>(flat)};
    flat -= len;
  }
  throw Error("dataset: position index out of range");
}

}  // namespace detail

inline WindowBatch sample_windows(const Dataset& ds, int64_t batch_size, int64_t H, Rng& rng) {
  check(!ds.episodes.empty(), "sample_windows: empty dataset");
  check(H >= 1, "sample_windows: H must be >= 1");
  const int64_t total = ds.total_steps();
  check(total > 0, "sample_windows: empty dataset");
  const double rtg_scale = ds.manifest.stats.rtg_scale();
  const double ctg_scale = ds.manifest.stats.ctg_scale();

  WindowBatch wb;
  wb.B = batch_size;
  wb.H = H;
  const int64_t n = batch_size * H;
  wb.ego.assign(n * env::kEgoDim, 0.0);
  wb.beam.assign(n * env::kBeamDim, 0.0);
  wb.nav.assign(n * env::kNavDim, 0.0);
  wb.act_prev.assign(n * kActDim, 0.0);
  wb.rtg_tok.assign(n, 0.0);
  wb.ctg_tok.assign(n, 0.0);
  wb.timestep.assign(n, 0);
  wb.pad.assign(n, 0.0);
  wb.act_tgt.assign(n * kActDim, 0.0);
  wb.rtg_tgt.assign(n, 0.0);
  wb.ctg_tgt.assign(n, 0.0);
  wb.ego_next.assign(n * env::kEgoDim, 0.0);
  wb.beam_next.assign(n * env::kBeamDim, 0.0);
  wb.nav_next.assign(n * env::kNavDim, 0.0);
  wb.dyn_valid.assign(n, 0.0);

  for (int64_t b = 0; b < batch_size; ++b) {
    const auto [e, t_end] = detail::locate(ds, static_cast<int64_t>(rng.below(total)));
    const auto& ep = ds.episodes[e];
    const int64_t len = static_cast<int64_t>(ep.length());
    for (int64_t p = 0; p < H; ++p) {
      const int64_t g = t_end - (H - 1) + p;
      const int64_t i = b * H + p;
      if (g < 0) continue;  // left padding
      wb.pad[i] = 1.0;
      wb.timestep[i] = g;
      for (int k = 0; k < env::kEgoDim; ++k) wb.ego[i * env::kEgoDim + k] = ep.ego[g][k];
      for (int k = 0; k < env::kBeamDim; ++k) wb.beam[i * env::kBeamDim + k] = ep.beam[g][k];
      for (int k = 0; k < env::kNavDim; ++k) wb.nav[i * env::kNavDim + k] = ep.nav[g][k];
      if (g > 0) {
        wb.act_prev[i * kActDim + 0] = ep.act[g - 1][0] / kAccelScale;
        wb.act_prev[i * kActDim + 1] = ep.act[g - 1][1];
      }
      wb.rtg_tok[i] = ep.rtg[g] / rtg_scale;
      wb.ctg_tok[i] = ep.ctg[g] / ctg_scale;
      wb.act_tgt[i * kActDim + 0] = ep.act[g][0] / kAccelScale;
      wb.act_tgt[i * kActDim + 1] = ep.act[g][1];
      wb.rtg_tgt[i] = ep.rtg[g] / rtg_scale;
      wb.ctg_tgt[i] = ep.ctg[g] / ctg_scale;
      if (g + 1 < len) {
        wb.dyn_valid[i] = 1.0;
        for (int k = 0; k < env::kEgoDim; ++k)
          wb.ego_next[i * env::kEgoDim + k] = ep.ego[g + 1][k];
        for (int k = 0; k < env::kBeamDim; ++k)
          wb.beam_next[i * env::kBeamDim + k] = ep.beam[g + 1][k];
        for (int k = 0; k < env::kNavDim; ++k)
          wb.nav_next[i * env::kNavDim + k] = ep.nav[g + 1][k];
      }
    }
  }
  return wb;
}

inline TransitionBatch sample_transitions(const Dataset& ds, int64_t n, Rng& rng) {
  check(!ds.episodes.empty(), "sample_transitions: empty dataset");
  const int64_t total = ds.total_steps();
  const double rtg_scale = ds.manifest.stats.rtg_scale();
  const double ctg_scale = ds.manifest.stats.ctg_scale();
  TransitionBatch tb;
  tb.N = n;
  tb.ego.assign(n * env::kEgoDim, 0.0);
  tb.beam.assign(n * env::kBeamDim, 0.0);
  tb.nav.assign(n * env::kNavDim, 0.0);
  tb.act.assign(n * kActDim, 0.0);
  tb.reward.assign(n, 0.0);
  tb.cost.assign(n, 0.0);
  tb.act_prev.assign(n * kActDim, 0.0);
  tb.rtg_tok.assign(n, 0.0);
  tb.ctg_tok.assign(n, 0.0);
  tb.timestep.assign(n, 0);
  for (int64_t i = 0; i < n; ++i) {
    const auto [e, t] = detail::locate(ds, static_cast<int64_t>(rng.below(total)));
    const auto& ep = ds.episodes[e];
    for (int k = 0; k < env::kEgoDim; ++k) tb.ego[i * env::kEgoDim + k] = ep.ego[t][k];
    for (int k = 0; k < env::kBeamDim; ++k) tb.beam[i * env::kBeamDim + k] = ep.beam[t][k];
    for (int k = 0; k < env::kNavDim; ++k) tb.nav[i * env::kNavDim + k] = ep.nav[t][k];
    tb.act[i * kActDim + 0] = ep.act[t][0] / kAccelScale;
    tb.act[i * kActDim + 1] = ep.act[t][1];
    tb.reward[i] = ep.reward[t];
    tb.cost[i] = ep.cost[t];
    if (t > 0) {
      tb.act_prev[i * kActDim + 0] = ep.act[t - 1][0] / kAccelScale;
      tb.act_prev[i * kActDim + 1] = ep.act[t - 1][1];
    }
    tb.rtg_tok[i] = ep.rtg[t] / rtg_scale;
    tb.ctg_tok[i] = ep.ctg[t] / ctg_scale;
    tb.timestep[i] = t;
  }
  return tb;
}

}  // namespace fusion::data
