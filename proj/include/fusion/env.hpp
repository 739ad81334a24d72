// SPDX-License-Identifier: Apache-2.0
//
// Deterministic multi-lane driving simulator: contexts sample a road layout,
// traffic density, and driver-aggressiveness mix; observations are factored
// into ego / beam / nav blocks, every entry normalized to [0, 1].
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/common.hpp"
#include "fusion/idm.hpp"

namespace fusion::env {

using json = nlohmann::json;

inline constexpr int kEgoDim = 7;   // speed, dist-to-goal, lane one-hot[4], lane-change progress
inline constexpr int kBeamDim = 16;
inline constexpr int kNavDim = 3;   // obstacle-ahead, remaining time, route progress
inline constexpr int kObsDim = kEgoDim + kBeamDim + kNavDim;
inline constexpr int kMaxLanes = 4;
inline constexpr int kHardStepCap = 1000;

enum class Split { train, test };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw Error("unknown split: " + s);
}

struct RewardWeights {
  double forward = 1.0;
  double speed = 0.01;
  double terminal = 10.0;
};

struct CostWeights {
  double collision = 1.0;
  double out_of_road = 1.0;
  double overspeed = 1.0;
  double v_limit_kph = 40.0;
  double overspeed_coeff = 0.02;
};

struct EnvConfig {
  double dt = 0.1;
  double road_length = 500.0;
  double lane_width = 3.5;
  double v_max = 20.0;  // m/s; 72 kph, so overspeeding is reachable
  double car_length = 5.0;
  double car_width = 2.0;
  double beam_range = 60.0;
  int max_steps = 1000;
  RewardWeights reward_w;
  CostWeights cost_w;
  double density_min = 1.2;  // train-split base density range, vehicles / 100 m
  double density_max = 2.6;
  double test_density_multiplier = 1.5;
  int lane_change_steps = 10;
  // driver-profile table shared by traffic and the data-collection policies;
  // the aggressiveness mix indexes into it
  std::vector<idm::IDMParams> profiles = idm::profiles();
};

struct Context {
  int layout_id = 0;
  double traffic_density = 2.0;               // vehicles per 100 m
  std::array<double, 3> aggressiveness_mix{0.4, 0.4, 0.2};  // timid / normal / aggressive
  uint64_t seed = 0;
};

inline void to_json(json& j, const RewardWeights& w) {
  j = json{{"forward", w.forward}, {"speed", w.speed}, {"terminal", w.terminal}};
}
inline void from_json(const json& j, RewardWeights& w) {
  j.at("forward").get_to(w.forward);
  j.at("speed").get_to(w.speed);
  j.at("terminal").get_to(w.terminal);
}
inline void to_json(json& j, const CostWeights& w) {
  j = json{{"collision", w.collision},
           {"out_of_road", w.out_of_road},
           {"overspeed", w.overspeed},
           {"v_limit_kph", w.v_limit_kph},
           {"overspeed_coeff", w.overspeed_coeff}};
}
inline void from_json(const json& j, CostWeights& w) {
  j.at("collision").get_to(w.collision);
  j.at("out_of_road").get_to(w.out_of_road);
  j.at("overspeed").get_to(w.overspeed);
  j.at("v_limit_kph").get_to(w.v_limit_kph);
  j.at("overspeed_coeff").get_to(w.overspeed_coeff);
}
inline void to_json(json& j, const EnvConfig& c) {
  j = json{{"dt", c.dt},
           {"road_length", c.road_length},
           {"lane_width", c.lane_width},
           {"v_max", c.v_max},
           {"car_length", c.car_length},
           {"car_width", c.car_width},
           {"beam_range", c.beam_range},
           {"max_steps", c.max_steps},
           {"reward_weights", c.reward_w},
           {"cost_weights", c.cost_w},
           {"density_min", c.density_min},
           {"density_max", c.density_max},
           {"test_density_multiplier", c.test_density_multiplier},
           {"lane_change_steps", c.lane_change_steps},
           {"profiles", c.profiles}};
}
inline void from_json(const json& j, EnvConfig& c) {
  j.at("dt").get_to(c.dt);
  j.at("road_length").get_to(c.road_length);
  j.at("lane_width").get_to(c.lane_width);
  j.at("v_max").get_to(c.v_max);
  j.at("car_length").get_to(c.car_length);
  j.at("car_width").get_to(c.car_width);
  j.at("beam_range").get_to(c.beam_range);
  j.at("max_steps").get_to(c.max_steps);
  j.at("reward_weights").get_to(c.reward_w);
  j.at("cost_weights").get_to(c.cost_w);
  j.at("density_min").get_to(c.density_min);
  j.at("density_max").get_to(c.density_max);
  j.at("test_density_multiplier").get_to(c.test_density_multiplier);
  j.at("lane_change_steps").get_to(c.lane_change_steps);
  j.at("profiles").get_to(c.profiles);
}

struct Obstacle {
  double x = 0;  // materialized position, strictly inside (0, L)
  int lane = 0;
};

struct RoadLayout {
  std::string name;
  double length = 500.0;
  int lane_count = 3;
  std::vector<Obstacle> obstacles;
  double goal = 500.0;
};

namespace detail {
struct LayoutSpec {
  const char* name;
  int lanes;
  std::vector<std::pair<double, int>> obstacle_fracs;  // (x / L, lane)
};
inline const std::vector<LayoutSpec>& layout_specs() {
  // First four are the training set; the last two are held out for the
  // dynamics-mismatch evaluation.
  static const std::vector<LayoutSpec> specs = {
      {"straight", 3, {}},
      {"speed_zone", 2, {}},
      {"merge", 3, {{0.50, 0}, {0.62, 0}, {0.74, 0}, {0.86, 0}}},
      {"bottleneck", 3, {{0.50, 1}}},
      {"dense_obstacle", 4, {{0.30, 3}, {0.40, 1}, {0.56, 2}, {0.70, 0}, {0.84, 2}}},
      {"weave", 3, {{0.24, 0}, {0.48, 2}, {0.72, 1}, {0.88, 0}}},
  };
  return specs;
}
}  // namespace detail

inline constexpr int kNumLayouts = 6;
inline constexpr int kNumTrainLayouts = 4;

inline RoadLayout make_layout(int layout_id, const EnvConfig& cfg = {}) {
  check(layout_id >= 0 && layout_id < kNumLayouts, "layout_id out of range");
  const auto& spec = detail::layout_specs()[layout_id];
  RoadLayout lay;
  lay.name = spec.name;
  lay.length = cfg.road_length;
  lay.lane_count = spec.lanes;
  lay.goal = cfg.road_length;
  for (auto [f, lane] : spec.obstacle_fracs) lay.obstacles.push_back({f * cfg.road_length, lane});
  return lay;
}

/// Layout registry as JSON so tests and run directories can pin exact scenes.
inline json layout_registry_json(const EnvConfig& cfg = {}) {
  json reg = json::object();
  for (int i = 0; i < kNumLayouts; ++i) {
    RoadLayout lay = make_layout(i, cfg);
    json obs = json::array();
    for (const auto& o : lay.obstacles) obs.push_back({{"x", o.x}, {"lane", o.lane}});
    reg[std::to_string(i)] = {{"name", lay.name},
                              {"length", lay.length},
                              {"lane_count", lay.lane_count},
                              {"goal", lay.goal},
                              {"obstacles", obs}};
  }
  return reg;
}

struct VehicleState {
  double x = 0;
  int lane = 0;
  int target_lane = kNoTarget;  // kNoTarget when not changing
  double lat_progress = 0;      // fraction of lane-change progress in [0, 1]
  double v = 0;
  double length = 5.0;

  static constexpr int kNoTarget = -1000;
  bool changing() const { return target_lane != kNoTarget; }
  double lateral_lane() const {
    return changing() ? lane + lat_progress * (target_lane - lane) : double(lane);
  }
};

struct FactoredObservation {
  std::array<double, kEgoDim> ego{};
  std::array<double, kBeamDim> beam{};
  std::array<double, kNavDim> nav{};

  std::array<double, kObsDim> flat() const {
    std::array<double, kObsDim> out{};
    size_t k = 0;
    for (double v : ego) out[k++] = v;
    for (double v : beam) out[k++] = v;
    for (double v : nav) out[k++] = v;
    return out;
  }
};

struct Action {
  double accel = 0;  // m/s^2, clamped to [-4, 4]
  int lane_cmd = 0;  // -1 (toward lane 0), 0, +1
};

enum class Reason { running, goal, collision, out_of_road, timeout };

inline std::string to_string(Reason r) {
  switch (r) {
    case Reason::running: return "running";
    case Reason::goal: return "goal";
    case Reason::collision: return "collision";
    case Reason::out_of_road: return "out_of_road";
    case Reason::timeout: return "timeout";
  }
  return "?";
}

inline Reason reason_from_string(const std::string& s) {
  for (Reason r : {Reason::running, Reason::goal, Reason::collision, Reason::out_of_road,
                   Reason::timeout})
    if (to_string(r) == s) return r;
  throw Error("unknown termination reason: " + s);
}

struct StepEvents {
  bool collision = false;
  bool out_of_road = false;
};

struct StepOutcome {
  FactoredObservation obs;
  double reward = 0;
  double cost = 0;
  bool done = false;
  Reason reason = Reason::running;
  StepEvents events;
};

/// Reward: forward progress + speed shaping + terminal bonus.
inline double reward_fn(const VehicleState& prev, const VehicleState& cur, bool reached_goal,
                        const RewardWeights& w) {
  return w.forward * (cur.x - prev.x) + w.speed * cur.v +
         w.terminal * (reached_goal ? 1.0 : 0.0);
}

/// Cost from the three safety events: collision, out-of-road, overspeed.
inline double cost_fn(const StepEvents& ev, double v_kph, const CostWeights& w) {
  return w.collision * (ev.collision ? 1.0 : 0.0) +
         w.out_of_road * (ev.out_of_road ? 1.0 : 0.0) +
         w.overspeed * w.overspeed_coeff * std::max(0.0, v_kph - w.v_limit_kph);
}

/// Draws a context. Both splits consume the stream identically, so a matched
/// seed yields exactly 1.5x the train density on the test split; the train
/// split draws from the first four layouts only.
inline Context sample_context(Split split, uint64_t seed, const EnvConfig& cfg = {}) {
  Rng rng = Rng(seed).fork("context");
  Context ctx;
  ctx.seed = seed;
  const double base = rng.uniform(cfg.density_min, cfg.density_max);
  double wsum = 0;
  for (auto& w : ctx.aggressiveness_mix) {
    w = rng.uniform(0.15, 1.0);
    wsum += w;
  }
  for (auto& w : ctx.aggressiveness_mix) w /= wsum;
  const int n_layouts = split == Split::train ? kNumTrainLayouts : kNumLayouts;
  ctx.layout_id = static_cast<int>(rng.below(n_layouts));
  ctx.traffic_density =
      base * (split == Split::test ? cfg.test_density_multiplier : 1.0);
  return ctx;
}

// ---------------------------------------------------------------------------
// The simulator.
// ---------------------------------------------------------------------------

class LaneworldEnv {
 public:
  struct TrafficVehicle {
    VehicleState state;
    int profile = 1;
    int cooldown = 0;
  };

  explicit LaneworldEnv(EnvConfig cfg = {}) : cfg_(std::move(cfg)) {
    check(cfg_.max_steps >= 1 && cfg_.max_steps <= kHardStepCap,
          "max_steps must lie in [1, 1000]");
    check(cfg_.profiles.size() == 3, "EnvConfig: expects three driver profiles");
  }

  const EnvConfig& config() const { return cfg_; }
  const RoadLayout& layout() const { return layout_; }
  const VehicleState& ego() const { return ego_; }
  const std::vector<TrafficVehicle>& traffic() const { return traffic_; }
  int steps() const { return step_count_; }
  bool done() const { return done_; }

  FactoredObservation reset(const Context& ctx) {
    ctx_ = ctx;
    layout_ = make_layout(ctx.layout_id, cfg_);
    rng_ = Rng(ctx.seed).fork("env");
    step_count_ = 0;
    done_ = false;
    ego_ = VehicleState{};
    ego_.lane = layout_.lane_count / 2;
    ego_.length = cfg_.car_length;
    place_traffic();
    return observe();
  }

  StepOutcome step(const Action& action) {
    check(!done_, "step after episode end");
    const VehicleState prev = ego_;
    StepEvents events;

    advance_ego(action, events);
    advance_traffic();
    ++step_count_;

    if (!events.out_of_road && collides_ego()) events.collision = true;
    const bool reached_goal =
        !events.collision && !events.out_of_road && ego_.x >= layout_.goal;

    StepOutcome out;
    out.events = events;
    if (events.collision)
      out.reason = Reason::collision;
    else if (events.out_of_road)
      out.reason = Reason::out_of_road;
    else if (reached_goal)
      out.reason = Reason::goal;
    else if (step_count_ >= cfg_.max_steps)
      out.reason = Reason::timeout;
    out.done = out.reason != Reason::running;
    done_ = out.done;

    out.reward = reward_fn(prev, ego_, reached_goal, cfg_.reward_w);
    out.cost = cost_fn(events, ego_.v * 3.6, cfg_.cost_w);
    out.obs = observe();
    return out;
  }

  FactoredObservation observe() const {
    FactoredObservation obs;
    obs.ego[0] = std::clamp(ego_.v / cfg_.v_max, 0.0, 1.0);
    obs.ego[1] = std::clamp((layout_.goal - ego_.x) / layout_.length, 0.0, 1.0);
    for (int k = 0; k < kMaxLanes; ++k)
      obs.ego[2 + k] = (k == std::clamp(ego_.lane, 0, layout_.lane_count - 1)) ? 1.0 : 0.0;
    obs.ego[6] = std::clamp(ego_.lat_progress, 0.0, 1.0);

    const double y0 = ego_y();
    constexpr double kTwoPi = 6.283185307179586;
    for (int k = 0; k < kBeamDim; ++k) {
      const double ang = kTwoPi * k / kBeamDim;
      obs.beam[k] = cast_beam(ego_.x, y0, std::cos(ang), std::sin(ang)) / cfg_.beam_range;
    }

    double obst = 1.0;
    for (const auto& o : layout_.obstacles) {
      if (o.x <= ego_.x) continue;
      if (o.lane == ego_.lane || (ego_.changing() && o.lane == ego_.target_lane))
        obst = std::min(obst, (o.x - ego_.x) / 100.0);
    }
    obs.nav[0] = std::clamp(obst, 0.0, 1.0);
    obs.nav[1] = std::clamp(1.0 - double(step_count_) / cfg_.max_steps, 0.0, 1.0);
    obs.nav[2] = std::clamp(ego_.x / layout_.length, 0.0, 1.0);
    return obs;
  }

 private:
  double lane_y(double lane_pos) const { return lane_pos * cfg_.lane_width; }
  double ego_y() const { return lane_y(ego_.lateral_lane()); }

  bool lane_valid(int lane) const { return lane >= 0 && lane < layout_.lane_count; }

  void advance_ego(const Action& action, StepEvents& events) {
    const int cmd = std::clamp(action.lane_cmd, -1, 1);
    const double prog_step = 1.0 / cfg_.lane_change_steps;

    if (!ego_.changing() && cmd != 0) {
      ego_.target_lane = ego_.lane + cmd;
      ego_.lat_progress = 0;
    }
    if (ego_.changing()) {
      if (lane_valid(ego_.target_lane)) {
        // committed change: runs to completion over lane_change_steps
        ego_.lat_progress += prog_step;
        if (ego_.lat_progress >= 1.0 - 1e-9) {
          ego_.lane = ego_.target_lane;
          ego_.target_lane = VehicleState::kNoTarget;
          ego_.lat_progress = 0;
        }
      } else {
        // drifting off the road: must be sustained past 50% to terminate
        const int dir = ego_.target_lane < ego_.lane ? -1 : 1;
        ego_.lat_progress += (cmd == dir) ? prog_step : -prog_step;
        if (ego_.lat_progress > 0.5 + 1e-9) {
          events.out_of_road = true;
        } else if (ego_.lat_progress <= 1e-9) {
          ego_.target_lane = VehicleState::kNoTarget;
          ego_.lat_progress = 0;
        }
      }
    }

    const double a = std::clamp(action.accel, idm::kAccelMin, idm::kAccelMax);
    ego_.v = std::clamp(ego_.v + a * cfg_.dt, 0.0, cfg_.v_max);
    ego_.x += ego_.v * cfg_.dt;  // semi-implicit Euler
  }

  struct Lead {
    double gap = 1e9;
    double v = 0;
  };

  // Nearest entity ahead of (x, v) in the given lane, bumper-to-bumper gap.
  Lead lead_in_lane(double x, int lane, const TrafficVehicle* self) const {
    Lead best;
    auto consider = [&](double ox, double ov, double olen) {
      if (ox <= x) return;
      const double gap = ox - x - 0.5 * (olen + cfg_.car_length);
      if (gap < best.gap) best = {gap, ov};
    };
    for (const auto& tv : traffic_) {
      if (&tv == self) continue;
      if (occupies_lane(tv.state, lane)) consider(tv.state.x, tv.state.v, tv.state.length);
    }
    if (self != nullptr && occupies_lane(ego_, lane)) consider(ego_.x, ego_.v, ego_.length);
    for (const auto& o : layout_.obstacles)
      if (o.lane == lane) consider(o.x, 0.0, cfg_.car_length);
    return best;
  }

  double rear_gap_in_lane(double x, int lane, const TrafficVehicle* self) const {
    double best = 1e9;
    auto consider = [&](double ox, double olen) {
      if (ox > x) return;
      best = std::min(best, x - ox - 0.5 * (olen + cfg_.car_length));
    };
    for (const auto& tv : traffic_) {
      if (&tv == self) continue;
      if (occupies_lane(tv.state, lane)) consider(tv.state.x, tv.state.length);
    }
    if (self != nullptr && occupies_lane(ego_, lane)) consider(ego_.x, ego_.length);
    return best;
  }

  static bool occupies_lane(const VehicleState& s, int lane) {
    return s.lane == lane || (s.changing() && s.target_lane == lane);
  }

  void advance_traffic() {
    const double prog_step = 1.0 / cfg_.lane_change_steps;
    for (auto& tv : traffic_) {
      const auto& p = cfg_.profiles[tv.profile];
      if (tv.cooldown > 0) --tv.cooldown;

      if (tv.state.changing()) {
        tv.state.lat_progress += prog_step;
        if (tv.state.lat_progress >= 1.0 - 1e-9) {
          tv.state.lane = tv.state.target_lane;
          tv.state.target_lane = VehicleState::kNoTarget;
          tv.state.lat_progress = 0;
        }
      } else if (tv.cooldown == 0) {
        maybe_change_lane(tv, p);
      }

      const Lead lead = lead_in_lane(tv.state.x, tv.state.lane, &tv);
      double a = idm::idm_accel(lead.gap, tv.state.v, lead.v, p);
      if (tv.state.changing()) {
        const Lead tgt = lead_in_lane(tv.state.x, tv.state.target_lane, &tv);
        a = std::min(a, idm::idm_accel(tgt.gap, tv.state.v, tgt.v, p));
      }
      tv.state.v = std::clamp(tv.state.v + a * cfg_.dt, 0.0, cfg_.v_max);
      tv.state.x += tv.state.v * cfg_.dt;
    }
    respawn_traffic();
  }

  void maybe_change_lane(TrafficVehicle& tv, const idm::IDMParams& p) {
    const Lead front = lead_in_lane(tv.state.x, tv.state.lane, &tv);
    const bool blocked =
        front.gap < p.T * tv.state.v + p.s0 + 2.0 && front.v < p.v0 - 0.5;
    if (!blocked) return;
    const double accept = (p.label == "aggressive" ? 1.0 : 2.0) * p.s0;
    std::vector<std::pair<int, double>> candidates;  // (lane, front gap)
    for (int d : {-1, +1}) {
      const int lane = tv.state.lane + d;
      if (!lane_valid(lane)) continue;
      const Lead adj = lead_in_lane(tv.state.x, lane, &tv);
      const double rear = rear_gap_in_lane(tv.state.x, lane, &tv);
      if (adj.gap > accept && rear > p.s0 && adj.gap > front.gap)
        candidates.push_back({lane, adj.gap});
    }
    if (candidates.empty()) return;
    size_t pick = 0;
    if (candidates.size() == 2) {
      if (std::fabs(candidates[0].second - candidates[1].second) < 1e-9)
        pick = rng_.below(2);
      else if (candidates[1].second > candidates[0].second)
        pick = 1;
    }
    tv.state.target_lane = candidates[pick].first;
    tv.state.lat_progress = 0;
    tv.cooldown = 2 * cfg_.lane_change_steps;
  }

  void respawn_traffic() {
    for (auto& tv : traffic_) {
      if (tv.state.x <= layout_.length + 20.0) continue;
      if (ego_.x < 150.0) continue;
      const double x = ego_.x - rng_.uniform(60.0, 120.0);
      const int lane = static_cast<int>(rng_.below(layout_.lane_count));
      if (x < 0) continue;
      bool clear = true;
      for (const auto& other : traffic_) {
        if (&other == &tv) continue;
        if (occupies_lane(other.state, lane) && std::fabs(other.state.x - x) < 2.5 * cfg_.car_length)
          clear = false;
      }
      if (!clear) continue;
      tv.state = VehicleState{};
      tv.state.x = x;
      tv.state.lane = lane;
      tv.state.length = cfg_.car_length;
      tv.state.v = 0.7 * std::min(cfg_.profiles[tv.profile].v0, cfg_.v_max);
    }
  }

  void place_traffic() {
    traffic_.clear();
    const int n = rng_.poisson(ctx_.traffic_density * layout_.length / 100.0);
    std::vector<double> mix(ctx_.aggressiveness_mix.begin(), ctx_.aggressiveness_mix.end());
    for (int i = 0; i < n; ++i) {
      const int profile = rng_.categorical(mix);
      const auto& p = cfg_.profiles[profile];
      for (int attempt = 0; attempt < 40; ++attempt) {
        const double x = rng_.uniform(25.0, layout_.length - 15.0);
        const int lane = static_cast<int>(rng_.below(layout_.lane_count));
        bool clear = true;
        for (const auto& other : traffic_)
          if (other.state.lane == lane && std::fabs(other.state.x - x) < 12.0) clear = false;
        for (const auto& o : layout_.obstacles)
          if (o.lane == lane && std::fabs(o.x - x) < 12.0) clear = false;
        if (!clear) continue;
        TrafficVehicle tv;
        tv.state.x = x;
        tv.state.lane = lane;
        tv.state.length = cfg_.car_length;
        tv.state.v = rng_.uniform(0.6, 0.95) * std::min(p.v0, cfg_.v_max);
        tv.profile = profile;
        traffic_.push_back(tv);
        break;
      }
    }
  }

  bool collides_ego() const {
    auto overlap = [&](const VehicleState& a, const VehicleState& b) {
      if (std::fabs(a.x - b.x) >= cfg_.car_length) return false;
      for (int la : {a.lane, a.changing() ? a.target_lane : a.lane})
        for (int lb : {b.lane, b.changing() ? b.target_lane : b.lane})
          if (la == lb) return true;
      return false;
    };
    for (const auto& tv : traffic_)
      if (overlap(ego_, tv.state)) return true;
    for (const auto& o : layout_.obstacles) {
      VehicleState ob;
      ob.x = o.x;
      ob.lane = o.lane;
      if (overlap(ego_, ob)) return true;
    }
    return false;
  }

  // Distance from (x0, y0) along unit direction (dx, dy) to the nearest
  // vehicle/obstacle box or road edge, capped at beam_range.
  double cast_beam(double x0, double y0, double dx, double dy) const {
    double best = cfg_.beam_range;
    auto box = [&](double cx, double cy, double hx, double hy) {
      double t0 = 0, t1 = best;
      // slab test per axis
      for (int axis = 0; axis < 2; ++axis) {
        const double o = axis == 0 ? x0 : y0;
        const double d = axis == 0 ? dx : dy;
        const double lo = (axis == 0 ? cx - hx : cy - hy);
        const double hi = (axis == 0 ? cx + hx : cy + hy);
        if (std::fabs(d) < 1e-12) {
          if (o < lo || o > hi) return;
        } else {
          double ta = (lo - o) / d, tb = (hi - o) / d;
          if (ta > tb) std::swap(ta, tb);
          t0 = std::max(t0, ta);
          t1 = std::min(t1, tb);
          if (t0 > t1) return;
        }
      }
      if (t0 > 1e-9 && t0 < best) best = t0;
    };
    for (const auto& tv : traffic_)
      box(tv.state.x, lane_y(tv.state.lateral_lane()), 0.5 * tv.state.length,
          0.5 * cfg_.car_width);
    for (const auto& o : layout_.obstacles)
      box(o.x, lane_y(o.lane), 0.5 * cfg_.car_length, 0.5 * cfg_.car_width);
    // road edges: horizontal lines below lane 0 and above the last lane
    for (double edge : {-0.5 * cfg_.lane_width,
                        (layout_.lane_count - 0.5) * cfg_.lane_width}) {
      if (std::fabs(dy) < 1e-12) continue;
      const double t = (edge - y0) / dy;
      if (t > 1e-9 && t < best) best = t;
    }
    return best;
  }

  EnvConfig cfg_;
  Context ctx_;
  RoadLayout layout_;
  Rng rng_{0};
  VehicleState ego_;
  std::vector<TrafficVehicle> traffic_;
  int step_count_ = 0;
  bool done_ = true;
};

}  // namespace fusion::env
