// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles: finite differences, coupled Monte-Carlo Wasserstein,
// brute-force suffix sums, direct entropy. These stay independent of the
// implementation paths they check.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fusion/autodiff.hpp"
#include "fusion/common.hpp"

namespace oracles {

/// Central finite differences of a scalar function of a ParamStore.
/// The function must rebuild its computation from the store on every call.
inline std::vector<std::vector<double>> finite_diff(
    fusion::ad::ParamStore& store, const std::function<double()>& eval, double h = 1e-5) {
  std::vector<std::vector<double>> grads;
  for (auto& entry : store.entries) {
    std::vector<double> g(entry.value.size());
    for (int64_t i = 0; i < entry.value.size(); ++i) {
      double* p = entry.value.ptr() + i;
      const double saved = *p;
      *p = saved + h;
      const double fp = eval();
      *p = saved - h;
      const double fm = eval();
      *p = saved;
      g[i] = (fp - fm) / (2 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// Max relative error between autodiff and finite-difference gradients,
/// with an absolute floor so near-zero gradients compare sanely.
inline double max_rel_err(const std::vector<std::vector<double>>& a,
                          const std::vector<std::vector<double>>& b, double floor = 1e-6) {
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) {
      const double denom = std::max({std::fabs(a[i][j]), std::fabs(b[i][j]), floor});
      worst = std::max(worst, std::fabs(a[i][j] - b[i][j]) / denom);
    }
  return worst;
}

/// Empirical 2-Wasserstein distance between diagonal Gaussians via the
/// optimal coupling (shared standard-normal draws).
inline double mc_w2_gaussian(const std::vector<double>& mu1, const std::vector<double>& s1,
                             const std::vector<double>& mu2, const std::vector<double>& s2,
                             int n_samples, fusion::Rng& rng) {
  const size_t d = mu1.size();
  double acc = 0;
  for (int k = 0; k < n_samples; ++k) {
    double sq = 0;
    for (size_t i = 0; i < d; ++i) {
      const double z = rng.normal();
      const double diff = (mu1[i] + s1[i] * z) - (mu2[i] + s2[i] * z);
      sq += diff * diff;
    }
    acc += sq;
  }
  return std::sqrt(acc / n_samples);
}

/// Brute-force suffix sums (quadratic double loop).
inline std::vector<double> brute_suffix_sums(const std::vector<double>& x) {
  std::vector<double> out(x.size(), 0.0);
  for (size_t t = 0; t < x.size(); ++t)
    for (size_t k = t; k < x.size(); ++k) out[t] += x[k];
  return out;
}

/// Direct Shannon entropy of a probability row.
inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

}  // namespace oracles
