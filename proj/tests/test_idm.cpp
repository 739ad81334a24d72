// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "fusion/env.hpp"
#include "fusion/idm.hpp"
#include "fusion/policy.hpp"

using namespace fusion;
using namespace fusion::idm;

TEST_CASE("idm_accel: pinned behaviours") {
  IDMParams p;  // v0=10, T=1.5, a_max=2, b=3, s0=2
  // equilibrium at desired speed on a free road
  CHECK(std::fabs(idm_accel(1e12, p.v0, p.v0, p)) < 1e-9);
  // free-road start accelerates at a_max
  CHECK(idm_accel(1e12, 0.0, 0.0, p) == doctest::Approx(p.a_max).epsilon(1e-9));
  // direct formula evaluation: s* = 9.5, a = 2 (1 - 0.0625 - 0.225625)
  CHECK(idm_accel(20.0, 5.0, 5.0, p) == doctest::Approx(1.42375).epsilon(1e-12));
  // nonpositive gap returns maximum braking
  CHECK(idm_accel(0.0, 5.0, 5.0, p) == kAccelMin);
  CHECK(idm_accel(-1.0, 5.0, 5.0, p) == kAccelMin);
}

TEST_CASE("idm platoon: single lane, defaults, 1000 steps, no collision or cost") {
  // Direct platoon simulation of the car-following law (the classical
  // collision-freedom property), audited with the environment's cost function.
  const IDMParams p;
  const double dt = 0.1, len = 5.0;
  const int n = 10;
  std::vector<double> x(n), v(n, 0.0);
  for (int i = 0; i < n; ++i) x[i] = (n - 1 - i) * 12.0;  // index 0 leads
  env::CostWeights cw;
  double total_cost = 0;
  double min_gap = 1e9;
  for (int step = 0; step < 1000; ++step) {
    std::vector<double> a(n);
    for (int i = 0; i < n; ++i) {
      if (i == 0)
        a[i] = idm_accel(1e12, v[i], v[i], p);
      else
        a[i] = idm_accel(x[i - 1] - x[i] - len, v[i], v[i - 1], p);
    }
    for (int i = 0; i < n; ++i) {
      v[i] = std::clamp(v[i] + a[i] * dt, 0.0, 20.0);
      x[i] += v[i] * dt;
    }
    for (int i = 1; i < n; ++i) min_gap = std::min(min_gap, x[i - 1] - x[i] - len);
    for (int i = 0; i < n; ++i) total_cost += env::cost_fn({}, v[i] * 3.6, cw);
  }
  CHECK(min_gap > 0.0);        // zero collisions
  CHECK(total_cost == 0.0);    // zero cost events (v0 = 10 m/s = 36 kph)
}

TEST_CASE("act: determinism and noise perturbation") {
  env::EnvConfig cfg;
  env::LaneworldEnv env(cfg);
  env::Context ctx = env::sample_context(env::Split::train, 2, cfg);
  auto obs = env.reset(ctx);
  const IDMParams p = profile("normal");
  {
    Rng r1(9), r2(9);
    auto a1 = policy::act(obs, nullptr, p, 0.0, r1, cfg);
    auto a2 = policy::act(obs, nullptr, p, 0.0, r2, cfg);
    CHECK(a1.accel == a2.accel);
    CHECK(a1.lane_cmd == a2.lane_cmd);
  }
  {
    Rng r1(9), r2(9);
    auto a0 = policy::act(obs, nullptr, p, 0.0, r1, cfg);
    auto an = policy::act(obs, nullptr, p, 0.25, r2, cfg);
    CHECK(a0.accel != an.accel);
  }
}

TEST_CASE("lane_decision: empty road holds lane, blocked front moves toward space") {
  env::EnvConfig cfg;
  const IDMParams p = profile("normal");
  Rng rng(1);
  env::FactoredObservation obs{};
  obs.ego[0] = 0.6;  // 12 m/s
  obs.ego[3] = 1.0;  // middle lane
  for (auto& b : obs.beam) b = 1.0;
  obs.nav = {1.0, 1.0, 0.2};
  CHECK(policy::lane_decision(obs, p, rng, cfg) == 0);

  obs.beam[0] = 8.0 / cfg.beam_range;  // boxed in behind a close lead
  for (int k : {15, 14, 13, 12}) obs.beam[k] = 3.0 / cfg.beam_range;  // right side occupied
  CHECK(policy::lane_decision(obs, p, rng, cfg) == 1);
}

TEST_CASE("profiles: timid never overspeeds on a free road") {
  env::EnvConfig cfg;
  env::LaneworldEnv env(cfg);
  env::Context ctx;
  ctx.layout_id = 0;
  ctx.traffic_density = 1e-9;
  env.reset(ctx);
  const IDMParams p = profile("timid");
  Rng rng(4);
  env::FactoredObservation obs = env.observe(), prev = obs;
  double cost = 0;
  bool done = false;
  while (!done) {
    auto a = policy::act(obs, &prev, p, 0.0, rng, cfg);
    auto out = env.step(a);
    prev = obs;
    obs = out.obs;
    cost += out.cost;
    done = out.done;
  }
  CHECK(cost == 0.0);
  CHECK(env.ego().v <= 11.12);  // 40 kph
}

TEST_CASE("profiles: aggressive changes lanes at least twice as often as timid") {
  env::EnvConfig cfg;
  cfg.max_steps = 300;
  auto count_changes = [&](const std::string& label) {
    int changes = 0;
    env::LaneworldEnv env(cfg);
    const IDMParams p = profile(label);
    for (int s = 0; s < 200; ++s) {
      env::Context ctx = env::sample_context(env::Split::train, 7000 + s, cfg);
      env.reset(ctx);
      Rng rng(100 + s);
      auto obs = env.observe(), prev = obs;
      int lane = env.ego().lane;
      bool done = false;
      while (!done) {
        auto a = policy::act(obs, &prev, p, 0.0, rng, cfg);
        auto out = env.step(a);
        prev = obs;
        obs = out.obs;
        if (env.ego().lane != lane) {
          ++changes;
          lane = env.ego().lane;
        }
        done = out.done;
      }
    }
    return changes;
  };
  const int aggressive = count_changes("aggressive");
  const int timid = count_changes("timid");
  INFO("aggressive=", aggressive, " timid=", timid);
  CHECK(aggressive >= 2 * std::max(1, timid));
}
