// SPDX-License-Identifier: Apache-2.0
//
// Safety-aware causal bisimulation learning: the pairwise metric target
// |dr| + lambda |dc| + gamma_b W2(p1, p2) over permuted minibatch pairs, and
// the encoder regularizer (||phi(s1) - phi_sg(s2)||_1 - d)^2. Targets are
// built from detached single-step world-model forwards composed with the
// encoder into latent space.
#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "fusion/autodiff.hpp"
#include "fusion/common.hpp"
#include "fusion/dataset.hpp"
#include "fusion/model.hpp"
#include "fusion/optim.hpp"

namespace fusion::cbl {

namespace ad = fusion::ad;

struct BisimConfig {
  double lambda = 1.0;   // cost-term weight
  double gamma_b = 0.99; // dynamics-term discount (independent of the MDP discount)
  uint64_t pairing_seed = 0;
};

inline void to_json(nlohmann::json& j, const BisimConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda}, {"gamma_b", c.gamma_b},
                     {"pairing_seed", c.pairing_seed}};
}
inline void from_json(const nlohmann::json& j, BisimConfig& c) {
  j.at("lambda").get_to(c.lambda);
  j.at("gamma_b").get_to(c.gamma_b);
  j.at("pairing_seed").get_to(c.pairing_seed);
}

/// Closed-form 2-Wasserstein distance between diagonal Gaussians:
/// sqrt(||mu1 - mu2||^2 + ||sigma1 - sigma2||^2).
inline double w2_gaussian(const double* mu1, const double* sig1, const double* mu2,
                          const double* sig2, int64_t d) {
  double sq = 0;
  for (int64_t i = 0; i < d; ++i) {
    check(sig1[i] >= 0 && sig2[i] >= 0, "w2_gaussian: negative sigma");
    const double dm = mu1[i] - mu2[i];
    const double ds = sig1[i] - sig2[i];
    sq += dm * dm + ds * ds;
  }
  return std::sqrt(sq);
}

inline double w2_gaussian(const std::vector<double>& mu1, const std::vector<double>& sig1,
                          const std::vector<double>& mu2, const std::vector<double>& sig2) {
  check(mu1.size() == sig1.size() && mu2.size() == sig2.size() && mu1.size() == mu2.size(),
        "w2_gaussian: size mismatch");
  return w2_gaussian(mu1.data(), sig1.data(), mu2.data(), sig2.data(),
                     static_cast<int64_t>(mu1.size()));
}

/// Aligned transition pair arrays; side 2 is a uniform shuffle of the same
/// minibatch. dyn_* hold the latent next-state Gaussians (detached).
struct PairBatch {
  int64_t N = 0, latent_dim = 0;
  data::TransitionBatch side1, side2;
  std::vector<double> dyn_mu1, dyn_sig1;  // [N, latent_dim]
  std::vector<double> dyn_mu2, dyn_sig2;
  std::vector<int> perm;
};

namespace detail {

inline data::TransitionBatch apply_perm(const data::TransitionBatch& tb,
                                        const std::vector<int>& perm) {
  data::TransitionBatch out;
  out.N = tb.N;
  auto take = [&](const std::vector<double>& src, std::vector<double>& dst, int64_t dim) {
    dst.resize(src.size());
    for (int64_t i = 0; i < tb.N; ++i)
      for (int64_t k = 0; k < dim; ++k) dst[i * dim + k] = src[perm[i] * dim + k];
  };
  take(tb.ego, out.ego, env::kEgoDim);
  take(tb.beam, out.beam, env::kBeamDim);
  take(tb.nav, out.nav, env::kNavDim);
  take(tb.act, out.act, data::kActDim);
  take(tb.reward, out.reward, 1);
  take(tb.cost, out.cost, 1);
  take(tb.act_prev, out.act_prev, data::kActDim);
  take(tb.rtg_tok, out.rtg_tok, 1);
  take(tb.ctg_tok, out.ctg_tok, 1);
  out.timestep.resize(tb.timestep.size());
  for (int64_t i = 0; i < tb.N; ++i) out.timestep[i] = tb.timestep[perm[i]];
  return out;
}

inline data::WindowBatch single_step_window(const data::TransitionBatch& tb) {
  data::WindowBatch wb;
  wb.B = tb.N;
  wb.H = 1;
  wb.ego = tb.ego;
  wb.beam = tb.beam;
  wb.nav = tb.nav;
  wb.act_prev = tb.act_prev;
  wb.rtg_tok = tb.rtg_tok;
  wb.ctg_tok = tb.ctg_tok;
  wb.timestep = tb.timestep;
  wb.pad.assign(tb.N, 1.0);
  // targets unused for dynamics queries
  wb.act_tgt.assign(tb.N * data::kActDim, 0.0);
  wb.rtg_tgt.assign(tb.N, 0.0);
  wb.ctg_tgt.assign(tb.N, 0.0);
  wb.ego_next.assign(tb.N * env::kEgoDim, 0.0);
  wb.beam_next.assign(tb.N * env::kBeamDim, 0.0);
  wb.nav_next.assign(tb.N * env::kNavDim, 0.0);
  wb.dyn_valid.assign(tb.N, 0.0);
  return wb;
}

/// Latent dynamics Gaussian from the state-factor heads composed with the
/// encoder: mu_z = phi(mu), sigma_z = |phi(mu + sigma) - phi(mu - sigma)| / 2.
/// Everything runs on a gradient-free tape (targets are detached).
inline void latent_dynamics(const model::CewmModel& m, const ad::ParamStore& store,
                            const data::TransitionBatch& tb, std::vector<double>& mu_z,
                            std::vector<double>& sig_z) {
  ad::Tape t(false);
  auto p = ad::make_leaves(t, store);
  const data::WindowBatch wb = single_step_window(tb);
  model::ModelOutput out = m.forward(t, p, wb);

  const int64_t N = tb.N;
  auto factor = [&](const model::GaussianHead& h, int64_t dim, std::vector<double>& mu,
                    std::vector<double>& sig) {
    mu.resize(N * dim);
    sig.resize(N * dim);
    const ad::Array &M = t.val(h.mu), &L = t.val(h.log_sigma);
    for (int64_t i = 0; i < N * dim; ++i) {
      mu[i] = M.at(i);
      sig[i] = std::exp(std::clamp(L.at(i), ad::kLogSigmaMin, ad::kLogSigmaMax));
    }
  };
  std::vector<double> me, se, mb, sb, mn, sn;
  factor(out.ego, env::kEgoDim, me, se);
  factor(out.beam, env::kBeamDim, mb, sb);
  factor(out.nav, env::kNavDim, mn, sn);

  auto encode_plain = [&](const std::vector<double>& e, const std::vector<double>& b,
                          const std::vector<double>& n) {
    ad::Var z = m.encode(t, p, t.constant(ad::Array::from({N, env::kEgoDim}, e)),
                         t.constant(ad::Array::from({N, env::kBeamDim}, b)),
                         t.constant(ad::Array::from({N, env::kNavDim}, n)));
    const ad::Array& Z = t.val(z);
    return std::vector<double>(Z.data->begin(), Z.data->end());
  };
  auto offset = [](const std::vector<double>& mu, const std::vector<double>& sig, double sign) {
    std::vector<double> out(mu.size());
    for (size_t i = 0; i < mu.size(); ++i) out[i] = mu[i] + sign * sig[i];
    return out;
  };

  mu_z = encode_plain(me, mb, mn);
  const auto hi = encode_plain(offset(me, se, 1.0), offset(mb, sb, 1.0), offset(mn, sn, 1.0));
  const auto lo = encode_plain(offset(me, se, -1.0), offset(mb, sb, -1.0), offset(mn, sn, -1.0));
  sig_z.resize(mu_z.size());
  for (size_t i = 0; i < mu_z.size(); ++i) sig_z[i] = 0.5 * std::fabs(hi[i] - lo[i]);
}

}  // namespace detail

/// Builds a permuted pair batch with detached latent dynamics Gaussians.
inline PairBatch make_pairs(const model::CewmModel& m, const ad::ParamStore& store,
                            const data::TransitionBatch& tb, Rng& rng) {
  PairBatch pb;
  pb.N = tb.N;
  pb.latent_dim = m.config().embed_dim;
  pb.perm.resize(tb.N);
  std::iota(pb.perm.begin(), pb.perm.end(), 0);
  rng.shuffle(pb.perm);
  pb.side1 = tb;
  pb.side2 = detail::apply_perm(tb, pb.perm);
  detail::latent_dynamics(m, store, pb.side1, pb.dyn_mu1, pb.dyn_sig1);
  // permute the side-1 Gaussians instead of re-running the model: identical
  // inputs must give identical dynamics, and they do (deterministic forward)
  const int64_t d = pb.latent_dim;
  pb.dyn_mu2.resize(pb.dyn_mu1.size());
  pb.dyn_sig2.resize(pb.dyn_sig1.size());
  for (int64_t i = 0; i < tb.N; ++i)
    for (int64_t k = 0; k < d; ++k) {
      pb.dyn_mu2[i * d + k] = pb.dyn_mu1[pb.perm[i] * d + k];
      pb.dyn_sig2[i * d + k] = pb.dyn_sig1[pb.perm[i] * d + k];
    }
  return pb;
}

/// Per-pair metric target: |dr| + lambda |dc| + gamma_b W2. No gradient flows
/// into the target (all inputs are plain values).
inline std::vector<double> bisim_target(const PairBatch& pb, const BisimConfig& cfg) {
  std::vector<double> d(pb.N);
  for (int64_t i = 0; i < pb.N; ++i) {
    const double dr = std::fabs(pb.side1.reward[i] - pb.side2.reward[i]);
    const double dc = std::fabs(pb.side1.cost[i] - pb.side2.cost[i]);
    const double w2 =
        w2_gaussian(pb.dyn_mu1.data() + i * pb.latent_dim, pb.dyn_sig1.data() + i * pb.latent_dim,
                    pb.dyn_mu2.data() + i * pb.latent_dim, pb.dyn_sig2.data() + i * pb.latent_dim,
                    pb.latent_dim);
    d[i] = dr + cfg.lambda * dc + cfg.gamma_b * w2;
  }
  return d;
}

/// Squared residual between the L1 latent distance (second argument
/// gradient-stopped) and the target, batch-averaged.
inline ad::Var bisim_loss_from_latents(ad::Tape& t, ad::Var z1, ad::Var z2_detached,
                                       const std::vector<double>& targets) {
  const int64_t N = t.val(z1).rows();
  ad::Var l1 = ad::sum_rows(t, ad::abs_op(t, ad::sub(t, z1, z2_detached)));
  ad::Var res = ad::sub(t, l1, t.constant(ad::Array::from({N, 1}, targets)));
  return ad::mean_all(t, ad::square(t, res));
}

inline ad::Var bisim_loss(ad::Tape& t, const model::CewmModel& m,
                          const std::vector<ad::Var>& params, const PairBatch& pb,
                          const std::vector<double>& targets) {
  auto block = [&](const std::vector<double>& v, int64_t dim) {
    return t.constant(ad::Array::from({pb.N, dim}, v));
  };
  ad::Var z1 = m.encode(t, params, block(pb.side1.ego, env::kEgoDim),
                        block(pb.side1.beam, env::kBeamDim), block(pb.side1.nav, env::kNavDim));
  ad::Var z2 = ad::detach(t, m.encode(t, params, block(pb.side2.ego, env::kEgoDim),
                                      block(pb.side2.beam, env::kBeamDim),
                                      block(pb.side2.nav, env::kNavDim)));
  return bisim_loss_from_latents(t, z1, z2, targets);
}

/// One CBL iteration: sample, permute, target, loss, encoder step. Model
/// (non-encoder) parameters are untouched. loss_weight scales the update
/// (beta in the combined objective); the returned value is the raw loss.
inline double cbl_step(const data::Dataset& ds, const model::CewmModel& m, ad::ParamStore& store,
                       ad::OptimState& encoder_opt, const BisimConfig& cfg, int64_t batch_size,
                       Rng& rng, double grad_clip = 1.0, double loss_weight = 1.0) {
  check(!ds.episodes.empty(), "cbl_step: empty dataset");
  data::TransitionBatch tb = data::sample_transitions(ds, batch_size, rng);
  PairBatch pb = make_pairs(m, store, tb, rng);
  const std::vector<double> targets = bisim_target(pb, cfg);

  ad::Tape t;
  auto params = ad::make_leaves(t, store);
  ad::Var raw = bisim_loss(t, m, params, pb, targets);
  const double value = t.val(raw).at(0);
  ad::Var loss = loss_weight == 1.0 ? raw : ad::scale(t, raw, loss_weight);
  t.backward(loss);

  std::vector<std::vector<double>*> bufs;
  std::vector<const std::vector<double>*> grads;
  for (int id : encoder_opt.param_ids) {
    bufs.push_back(&t.grad_buf(params[id].id));
    grads.push_back(bufs.back());
  }
  ad::clip_grad_norm(bufs, grad_clip);
  ad::adam_step(store, grads, encoder_opt);
  return value;
}

}  // namespace fusion::cbl
