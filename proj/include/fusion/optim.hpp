// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fusion/autodiff.hpp"
#include "fusion/common.hpp"

namespace fusion::ad {

/// Adam state over a subset of a ParamStore (identified by entry indices).
/// Moment buffers are shape-congruent with their parameters; the step counter
/// strictly increases.
struct OptimState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<int> param_ids;
  std::vector<std::vector<double>> m, v;

  static OptimState make(const ParamStore& store, std::vector<int> ids, double lr = 1e-3) {
    OptimState s;
    s.lr = lr;
    s.param_ids = std::move(ids);
    for (int id : s.param_ids) {
      s.m.emplace_back(store.value(id).size(), 0.0);
      s.v.emplace_back(store.value(id).size(), 0.0);
    }
    return s;
  }
};

/// Global L2-norm clip over a set of gradient buffers; returns the pre-clip norm.
inline double clip_grad_norm(std::vector<std::vector<double>*>& grads, double max_norm) {
  double sq = 0;
  for (auto* g : grads)
    for (double x : *g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto* g : grads)
      for (double& x : *g) x *= s;
  }
  return norm;
}

/// One bias-corrected adaptive-moment update. grads[i] aligns with
/// state.param_ids[i]; shape congruence is checked.
inline void adam_step(ParamStore& store, const std::vector<const std::vector<double>*>& grads,
                      OptimState& state) {
  check(grads.size() == state.param_ids.size(), "adam_step: gradient count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < state.param_ids.size(); ++i) {
    Array& p = store.value(state.param_ids[i]);
    const auto& g = *grads[i];
    check(static_cast<int64_t>(g.size()) == p.size(), "adam_step: shape mismatch");
    auto& m = state.m[i];
    auto& v = state.v[i];
    double* pd = p.ptr();
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      pd[j] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

}  // namespace fusion::ad
