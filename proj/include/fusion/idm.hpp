// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/common.hpp"

namespace fusion::idm {

inline constexpr double kAccelMin = -4.0;  // environment action range, m/s^2
inline constexpr double kAccelMax = 4.0;

/// Intelligent-driver-model parameters. Defaults match the calm reference
/// parameterization used throughout the tests.
struct IDMParams {
  double v0 = 10.0;     // desired speed, m/s
  double T = 1.5;       // time headway, s
  double a_max = 2.0;   // max acceleration, m/s^2
  double b = 3.0;       // comfortable deceleration, m/s^2
  double s0 = 2.0;      // minimum gap, m
  double delta = 4.0;   // acceleration exponent
  std::string label = "default";
};

/// The three data-collection / traffic profiles: timid, normal, aggressive
/// (aggressive doubles a_max and accepts half the usual lane-change clearance).
inline const std::vector<IDMParams>& profiles() {
  static const std::vector<IDMParams> p = {
      {10.0, 2.0, 2.0, 3.0, 2.5, 4.0, "timid"},
      {12.0, 1.5, 2.0, 3.0, 2.0, 4.0, "normal"},
      {16.0, 0.8, 4.0, 3.5, 1.5, 4.0, "aggressive"},
  };
  return p;
}

inline const IDMParams& profile(const std::string& label) {
  for (const auto& p : profiles())
    if (p.label == label) return p;
  throw Error("unknown driver profile: " + label);
}

inline void to_json(nlohmann::json& j, const IDMParams& p) {
  j = nlohmann::json{{"v0", p.v0}, {"T", p.T},         {"a_max", p.a_max}, {"b", p.b},
                     {"s0", p.s0}, {"delta", p.delta}, {"label", p.label}};
}
inline void from_json(const nlohmann::json& j, IDMParams& p) {
  j.at("v0").get_to(p.v0);
  j.at("T").get_to(p.T);
  j.at("a_max").get_to(p.a_max);
  j.at("b").get_to(p.b);
  j.at("s0").get_to(p.s0);
  j.at("delta").get_to(p.delta);
  j.at("label").get_to(p.label);
}

/// IDM acceleration law:
///   a = a_max [1 - (v/v0)^delta - (s*/s)^2],
///   s* = max(0, s0 + vT + v(v - v_lead) / (2 sqrt(a_max b)))
/// Nonpositive gap returns maximum braking. Output clamped to [-4, 4].
inline double idm_accel(double gap, double v, double v_lead, const IDMParams& p) {
  if (gap <= 0.0) return kAccelMin;
  const double s_star =
      std::max(0.0, p.s0 + v * p.T + v * (v - v_lead) / (2.0 * std::sqrt(p.a_max * p.b)));
  const double a =
      p.a_max * (1.0 - std::pow(v / p.v0, p.delta) - (s_star / gap) * (s_star / gap));
  return std::clamp(a, kAccelMin, kAccelMax);
}

}  // namespace fusion::idm
