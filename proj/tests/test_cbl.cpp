// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "fusion/cbl.hpp"
#include "oracles.hpp"

using namespace fusion;
using namespace fusion::cbl;
namespace ad = fusion::ad;

namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.context = 4;
  cfg.dropout = 0.0;
  cfg.max_timestep = 64;
  return cfg;
}

// Synthetic corpus with two reward/cost-distinct state clusters.
data::Dataset two_cluster_dataset(int steps_per_episode = 30) {
  data::Dataset ds;
  Rng rng(77);
  for (int e = 0; e < 4; ++e) {
    data::EpisodeRecord ep;
    for (int t = 0; t < steps_per_episode; ++t) {
      const bool cluster_a = (t % 2 == 0) ^ (e % 2 == 1);
      std::array<double, env::kEgoDim> ego{};
      std::array<double, env::kBeamDim> beam{};
      std::array<double, env::kNavDim> nav{};
      for (auto& v : ego) v = (cluster_a ? 0.15 : 0.85) + rng.uniform(-0.05, 0.05);
      for (auto& v : beam) v = (cluster_a ? 0.2 : 0.8) + rng.uniform(-0.05, 0.05);
      for (auto& v : nav) v = (cluster_a ? 0.25 : 0.75) + rng.uniform(-0.05, 0.05);
      ep.ego.push_back(ego);
      ep.beam.push_back(beam);
      ep.nav.push_back(nav);
      ep.act.push_back({rng.uniform(-1, 1), 0.0});
      ep.reward.push_back(cluster_a ? 1.0 : 0.0);
      ep.cost.push_back(cluster_a ? 0.0 : 1.0);
    }
    data::annotate_returns(ep);
    ds.episodes.push_back(ep);
  }
  ds.manifest.episode_count = 4;
  ds.manifest.stats = data::compute_stats(ds.episodes);
  return ds;
}

}  // namespace

TEST_CASE("w2_gaussian: pinned examples and negative-sigma error") {
  std::vector<double> mu{0.3, -1.2, 4.0}, sig{0.5, 1.5, 0.1};
  CHECK(w2_gaussian(mu, sig, mu, sig) == 0.0);
  CHECK(w2_gaussian({0.0}, {1.0}, {3.0}, {1.0}) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK_THROWS_AS(w2_gaussian({0.0}, {-0.1}, {0.0}, {1.0}), Error);
}

TEST_CASE("w2_gaussian: matches coupled Monte-Carlo estimate within 2%") {
  Rng rng(31);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> mu1(4), s1(4), mu2(4), s2(4);
    for (int i = 0; i < 4; ++i) {
      mu1[i] = rng.uniform(-2, 2);
      mu2[i] = rng.uniform(-2, 2);
      s1[i] = rng.uniform(0.2, 1.5);
      s2[i] = rng.uniform(0.2, 1.5);
    }
    const double closed = w2_gaussian(mu1, s1, mu2, s2);
    Rng mc(100 + trial);
    const double est = oracles::mc_w2_gaussian(mu1, s1, mu2, s2, 100000, mc);
    CHECK(std::fabs(closed - est) / closed < 0.02);
  }
}

TEST_CASE("bisim_target: reflexivity, arithmetic, symmetry") {
  ad::ParamStore store;
  model::CewmModel m(tiny_cfg(), store, Rng(1));
  data::Dataset ds = two_cluster_dataset();
  Rng rng(5);
  data::TransitionBatch tb = data::sample_transitions(ds, 16, rng);
  BisimConfig cfg;

  // identical sides: pair each element with itself
  {
    PairBatch pb = make_pairs(m, store, tb, rng);
    for (int64_t i = 0; i < pb.N; ++i) pb.perm[i] = int(i);
    pb.side2 = pb.side1;
    pb.dyn_mu2 = pb.dyn_mu1;
    pb.dyn_sig2 = pb.dyn_sig1;
    auto d = bisim_target(pb, cfg);
    for (double v : d) CHECK(v == 0.0);
  }

  // direct arithmetic: |dr)=1, |dc|=0.5, lambda=1, identical dynamics -> 1.5
  {
    PairBatch pb;
    pb.N = 1;
    pb.latent_dim = 2;
    pb.side1.reward = {1.0};
    pb.side1.cost = {0.75};
    pb.side2.reward = {0.0};
    pb.side2.cost = {0.25};
    pb.dyn_mu1 = {0.3, 0.4};
    pb.dyn_sig1 = {0.1, 0.2};
    pb.dyn_mu2 = pb.dyn_mu1;
    pb.dyn_sig2 = pb.dyn_sig1;
    auto d = bisim_target(pb, cfg);
    CHECK(d[0] == doctest::Approx(1.5).epsilon(1e-12));
  }

  // symmetry: swapping the sides leaves every target unchanged
  {
    PairBatch pb = make_pairs(m, store, tb, rng);
    auto d_fwd = bisim_target(pb, cfg);
    PairBatch swapped = pb;
    std::swap(swapped.side1, swapped.side2);
    std::swap(swapped.dyn_mu1, swapped.dyn_mu2);
    std::swap(swapped.dyn_sig1, swapped.dyn_sig2);
    auto d_bwd = bisim_target(swapped, cfg);
    double max_diff = 0;
    for (int64_t i = 0; i < pb.N; ++i) max_diff = std::max(max_diff, std::fabs(d_fwd[i] - d_bwd[i]));
    CHECK(max_diff == 0.0);
    for (double v : d_fwd) CHECK(v >= 0.0);
  }
}

TEST_CASE("bisim_loss: pinned values") {
  ad::Tape t;
  // phi(s1) = phi(s2), target 0 -> loss 0
  {
    ad::Var z = t.leaf(ad::Array::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    ad::Var z2 = ad::detach(t, z);
    ad::Var loss = bisim_loss_from_latents(t, z, z2, {0.0, 0.0});
    CHECK(t.val(loss).at(0) == 0.0);
  }
  // scalar latent: |dphi| = 2, target 1 -> (2 - 1)^2 = 1
  {
    ad::Var z1 = t.leaf(ad::Array::from({1, 1}, {3.0}));
    ad::Var z2 = t.constant(ad::Array::from({1, 1}, {1.0}));
    ad::Var loss = bisim_loss_from_latents(t, z1, z2, {1.0});
    CHECK(t.val(loss).at(0) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("bisim_loss: stop-gradient leaves the detached path at exactly zero") {
  // Side 1 runs through a second parameter copy; the original parameters are
  // reachable only through phi(s2), which is detached, so their gradients
  // must be exactly zero.
  ad::ParamStore store, store_copy;
  model::CewmModel m(tiny_cfg(), store, Rng(2));
  model::CewmModel m_copy(tiny_cfg(), store_copy, Rng(2));
  data::Dataset ds = two_cluster_dataset();
  Rng rng(9);
  data::TransitionBatch tb = data::sample_transitions(ds, 8, rng);
  PairBatch pb = make_pairs(m, store, tb, rng);
  auto targets = bisim_target(pb, {});

  ad::Tape t;
  auto p_orig = ad::make_leaves(t, store);
  auto p_copy = ad::make_leaves(t, store_copy);
  auto block = [&](const std::vector<double>& v, int64_t dim) {
    return t.constant(ad::Array::from({pb.N, dim}, v));
  };
  ad::Var z1 = m_copy.encode(t, p_copy, block(pb.side1.ego, env::kEgoDim),
                             block(pb.side1.beam, env::kBeamDim),
                             block(pb.side1.nav, env::kNavDim));
  ad::Var z2 = ad::detach(t, m.encode(t, p_orig, block(pb.side2.ego, env::kEgoDim),
                                      block(pb.side2.beam, env::kBeamDim),
                                      block(pb.side2.nav, env::kNavDim)));
  ad::Var loss = bisim_loss_from_latents(t, z1, z2, targets);
  t.backward(loss);
  for (int id : m.encoder_param_ids()) {
    ad::Array g = t.grad(p_orig[id]);
    for (int64_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == 0.0);
  }
  // while the live path does receive gradient
  double mag = 0;
  for (int id : m_copy.encoder_param_ids()) {
    ad::Array g = t.grad(p_copy[id]);
    for (int64_t i = 0; i < g.size(); ++i) mag += std::fabs(g.at(i));
  }
  CHECK(mag > 0.0);
}

TEST_CASE("cbl_step: zero learning rate leaves the encoder unchanged") {
  ad::ParamStore store;
  model::CewmModel m(tiny_cfg(), store, Rng(3));
  data::Dataset ds = two_cluster_dataset();
  ad::OptimState opt = ad::OptimState::make(store, m.encoder_param_ids(), 0.0);
  std::vector<std::vector<double>> before;
  for (const auto& e : store.entries) before.emplace_back(e.value.data->begin(), e.value.data->end());
  Rng rng(10);
  cbl_step(ds, m, store, opt, {}, 16, rng);
  for (size_t i = 0; i < store.entries.size(); ++i)
    CHECK(std::vector<double>(store.entries[i].value.data->begin(),
                              store.entries[i].value.data->end()) == before[i]);
}

TEST_CASE("cbl_step: duplicated minibatch halves make self-pairs exact zeros") {
  ad::ParamStore store;
  model::CewmModel m(tiny_cfg(), store, Rng(4));
  data::Dataset ds = two_cluster_dataset();
  Rng rng(11);
  data::TransitionBatch tb = data::sample_transitions(ds, 4, rng);
  // duplicate the batch into two identical halves
  data::TransitionBatch dup;
  dup.N = 8;
  auto dup2 = [&](const std::vector<double>& src, std::vector<double>& dst) {
    dst = src;
    dst.insert(dst.end(), src.begin(), src.end());
  };
  dup2(tb.ego, dup.ego);
  dup2(tb.beam, dup.beam);
  dup2(tb.nav, dup.nav);
  dup2(tb.act, dup.act);
  dup2(tb.reward, dup.reward);
  dup2(tb.cost, dup.cost);
  dup2(tb.act_prev, dup.act_prev);
  dup2(tb.rtg_tok, dup.rtg_tok);
  dup2(tb.ctg_tok, dup.ctg_tok);
  dup.timestep = tb.timestep;
  dup.timestep.insert(dup.timestep.end(), tb.timestep.begin(), tb.timestep.end());

  PairBatch pb = make_pairs(m, store, dup, rng);
  // force a pairing where i is matched with its duplicate
  for (int i = 0; i < 4; ++i) {
    pb.perm[i] = i + 4;
    pb.perm[i + 4] = i;
  }
  pb.side2 = cbl::detail::apply_perm(pb.side1, pb.perm);
  const int64_t d = pb.latent_dim;
  for (int64_t i = 0; i < pb.N; ++i)
    for (int64_t k = 0; k < d; ++k) {
      pb.dyn_mu2[i * d + k] = pb.dyn_mu1[pb.perm[i] * d + k];
      pb.dyn_sig2[i * d + k] = pb.dyn_sig1[pb.perm[i] * d + k];
    }
  auto targets = bisim_target(pb, {});
  for (double v : targets) CHECK(v == 0.0);
}

TEST_CASE("cbl training: loss decreases and clusters separate") {
  ad::ParamStore store;
  model::CewmModel m(tiny_cfg(), store, Rng(5));
  data::Dataset ds = two_cluster_dataset();
  ad::OptimState opt = ad::OptimState::make(store, m.encoder_param_ids(), 1e-3);
  BisimConfig cfg;
  Rng rng(12);

  std::vector<double> losses;
  for (int k = 0; k < 500; ++k) losses.push_back(cbl_step(ds, m, store, opt, cfg, 32, rng));

  auto smoothed = [&](int end) {  // trailing mean over a 50-step window
    double s = 0;
    for (int i = end - 50; i < end; ++i) s += losses[i];
    return s / 50;
  };
  const double early = smoothed(60), late = smoothed(500);
  INFO("early=", early, " late=", late);
  CHECK(late < early);
  // near-monotone after smoothing: each window mean within a small slack of the previous
  int violations = 0;
  for (int end = 61; end <= 500; ++end)
    if (smoothed(end) > smoothed(end - 1) + 1e-3) ++violations;
  CHECK(violations == 0);

  // separation: inter-cluster latent L1 distance exceeds intra-cluster
  ad::Tape t(false);
  auto p = ad::make_leaves(t, store);
  Rng srng(13);
  data::TransitionBatch tb = data::sample_transitions(ds, 64, srng);
  ad::Var z = m.encode(t, p, t.constant(ad::Array::from({64, env::kEgoDim}, tb.ego)),
                       t.constant(ad::Array::from({64, env::kBeamDim}, tb.beam)),
                       t.constant(ad::Array::from({64, env::kNavDim}, tb.nav)));
  const ad::Array& Z = t.val(z);
  const int64_t dim = Z.cols();
  auto cluster_of = [&](int64_t i) { return tb.reward[i] > 0.5 ? 0 : 1; };
  double inter = 0, intra = 0;
  int64_t n_inter = 0, n_intra = 0;
  for (int64_t i = 0; i < 64; ++i)
    for (int64_t j = i + 1; j < 64; ++j) {
      double l1 = 0;
      for (int64_t k = 0; k < dim; ++k) l1 += std::fabs(Z.at(i * dim + k) - Z.at(j * dim + k));
      if (cluster_of(i) == cluster_of(j)) {
        intra += l1;
        ++n_intra;
      } else {
        inter += l1;
        ++n_inter;
      }
    }
  inter /= n_inter;
  intra /= n_intra;
  INFO("inter=", inter, " intra=", intra);
  CHECK(inter > intra);
}
