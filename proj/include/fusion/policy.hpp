// SPDX-License-Identifier: Apache-2.0
//
// Scripted ego controllers for data collection. They read only the factored
// observation (beams for gaps, finite-differenced front distance for the lead
// speed estimate), so they are pure functions of (obs, prev_obs, params, rng).
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "fusion/env.hpp"
#include "fusion/idm.hpp"

namespace fusion::policy {

using env::Action;
using env::EnvConfig;
using env::FactoredObservation;
using idm::IDMParams;

namespace detail {

inline double front_gap_m(const FactoredObservation& obs, const EnvConfig& cfg) {
  // beam 0 points straight ahead; ranges hit the lead box's rear face
  if (obs.beam[0] >= 0.999) return 1e9;
  return std::max(0.1, obs.beam[0] * cfg.beam_range - 0.5 * cfg.car_length);
}

inline double side_clear_m(const FactoredObservation& obs, const EnvConfig& cfg, bool left) {
  // 22.5..90 degree sectors on the requested side probe the adjacent corridor
  double best = 1.0;
  for (int k : {1, 2, 3, 4}) best = std::min(best, obs.beam[left ? k : env::kBeamDim - k]);
  return best * cfg.beam_range;
}

}  // namespace detail

/// Gap-acceptance lane choice from the observation alone. Changes toward the
/// side with the larger clearance when boxed in behind a close lead; the
/// aggressive profile accepts half the clearance.
inline int lane_decision(const FactoredObservation& obs, const IDMParams& p, Rng& rng,
                         const EnvConfig& cfg = {}) {
  const double v = obs.ego[0] * cfg.v_max;
  const double front = detail::front_gap_m(obs, cfg);
  if (front > p.T * v + p.s0 + 2.0) return 0;
  const double accept =
      (p.label == "aggressive" ? 1.0 : 2.0) * p.s0 + 0.5 * cfg.lane_width;
  const double left = detail::side_clear_m(obs, cfg, true);
  const double right = detail::side_clear_m(obs, cfg, false);
  const bool left_ok = left > accept;
  const bool right_ok = right > accept;
  if (left_ok && right_ok)
    return std::fabs(left - right) < 1e-9 ? (rng.below(2) ? 1 : -1) : (left > right ? 1 : -1);
  if (left_ok) return 1;
  if (right_ok) return -1;
  return 0;
}

/// IDM acceleration plus lane choice from the observation; optional seeded
/// Gaussian perturbation (std = noise_level * 4 m/s^2) for mixed-quality data.
inline Action act(const FactoredObservation& obs, const FactoredObservation* prev_obs,
                  const IDMParams& p, double noise_level, Rng& rng,
                  const EnvConfig& cfg = {}) {
  const double v = obs.ego[0] * cfg.v_max;
  const double gap = detail::front_gap_m(obs, cfg);
  double v_lead = v;  // free road or no history: assume zero closing rate
  if (gap < 1e8 && prev_obs != nullptr) {
    const double prev_gap = detail::front_gap_m(*prev_obs, cfg);
    // gap rate = lead speed minus ego speed over the last step
    if (prev_gap < 1e8) v_lead = std::clamp(v + (gap - prev_gap) / cfg.dt, 0.0, cfg.v_max);
  }
  Action a;
  a.accel = idm::idm_accel(gap, v, v_lead, p);
  if (noise_level > 0) a.accel += rng.normal() * noise_level * 4.0;
  a.accel = std::clamp(a.accel, idm::kAccelMin, idm::kAccelMax);
  a.lane_cmd = lane_decision(obs, p, rng, cfg);
  return a;
}

}  // namespace fusion::policy
