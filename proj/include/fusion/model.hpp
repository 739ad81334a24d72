// SPDX-License-Identifier: Apache-2.0
//
// Safety-aware causal transformer. Each timestep contributes six tokens in
// the fixed order [a_{t-1}, C_t, R_t, s^ego_t, s^beam_t, s^nav_t]; flattened
// index(t, k) = 6t + k. Heads read the hidden state of the token preceding
// their target: the ctg head reads the a_{t-1} token, the rtg head reads the
// C_t token, and the action and state-factor heads read the last state token
// of the step. The ego/beam/nav token embedders plus a fusion map form the
// state encoder shared with bisimulation learning.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/autodiff.hpp"
#include "fusion/common.hpp"
#include "fusion/dataset.hpp"

namespace fusion::model {

using json = nlohmann::json;
namespace ad = fusion::ad;

inline constexpr int kTokensPerStep = 6;
enum TokenKind { kTokActPrev = 0, kTokCtg = 1, kTokRtg = 2, kTokEgo = 3, kTokBeam = 4, kTokNav = 5 };

struct ModelConfig {
  int64_t embed_dim = 64;
  int64_t layers = 3;
  int64_t heads = 4;
  int64_t context = 20;  // H, steps per window
  double dropout = 0.1;
  int64_t mlp_mult = 2;
  int64_t max_timestep = 1000;
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"embed_dim", c.embed_dim}, {"layers", c.layers},   {"heads", c.heads},
           {"context", c.context},     {"dropout", c.dropout}, {"mlp_mult", c.mlp_mult},
           {"max_timestep", c.max_timestep}};
}
inline void from_json(const json& j, ModelConfig& c) {
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("context").get_to(c.context);
  j.at("dropout").get_to(c.dropout);
  j.at("mlp_mult").get_to(c.mlp_mult);
  j.at("max_timestep").get_to(c.max_timestep);
}

struct GaussianHead {
  ad::Var mu, log_sigma;
};

struct ModelOutput {
  GaussianHead rtg, ctg, act, ego, beam, nav;
  // per-layer attention probabilities [heads*B*S, S], captured pre-dropout
  std::vector<ad::Array> attention;
  ad::Array mask;  // [B*S, S] causal/pad support shared by all layers
  int64_t B = 0, S = 0;
};

struct LossToggles {
  bool rtg = true, ctg = true, act = true, dyn = true;
};

struct LossBreakdown {
  double rtg = 0, ctg = 0, act = 0, dyn = 0, total = 0;
};

class CewmModel {
 public:
  CewmModel(ModelConfig cfg, ad::ParamStore& store, Rng init_rng) : cfg_(cfg) {
    check(cfg_.embed_dim % cfg_.heads == 0, "embed_dim must be divisible by heads");
    const int64_t d = cfg_.embed_dim;
    auto w = [&](const std::string& name, int64_t r, int64_t c, double std = 0.02) {
      ad::Array a = ad::Array::zeros({r, c});
      for (int64_t i = 0; i < a.size(); ++i) (*a.data)[i] = init_rng.normal() * std;
      return store.add(name, a);
    };
    auto zeros = [&](const std::string& name, int64_t n) {
      return store.add(name, ad::Array::zeros({n}));
    };
    auto ones = [&](const std::string& name, int64_t n) {
      return store.add(name, ad::Array::full({n}, 1.0));
    };

    embed_w_[kTokActPrev] = w("embed.act.w", data::kActDim, d);
    embed_b_[kTokActPrev] = zeros("embed.act.b", d);
    embed_w_[kTokCtg] = w("embed.ctg.w", 1, d);
    embed_b_[kTokCtg] = zeros("embed.ctg.b", d);
    embed_w_[kTokRtg] = w("embed.rtg.w", 1, d);
    embed_b_[kTokRtg] = zeros("embed.rtg.b", d);
    embed_w_[kTokEgo] = w("embed.ego.w", env::kEgoDim, d);
    embed_b_[kTokEgo] = zeros("embed.ego.b", d);
    embed_w_[kTokBeam] = w("embed.beam.w", env::kBeamDim, d);
    embed_b_[kTokBeam] = zeros("embed.beam.b", d);
    embed_w_[kTokNav] = w("embed.nav.w", env::kNavDim, d);
    embed_b_[kTokNav] = zeros("embed.nav.b", d);
    time_emb_ = w("embed.time", cfg_.max_timestep, d);
    fusion_w_ = w("encoder.fusion.w", 3 * d, d);
    fusion_b_ = zeros("encoder.fusion.b", d);

    for (int64_t l = 0; l < cfg_.layers; ++l) {
      Layer lay;
      const std::string p = "layer" + std::to_string(l) + ".";
      lay.ln1_g = ones(p + "ln1.g", d);
      lay.ln1_b = zeros(p + "ln1.b", d);
      lay.qkv_w = w(p + "attn.qkv.w", d, 3 * d);
      lay.qkv_b = zeros(p + "attn.qkv.b", 3 * d);
      lay.proj_w = w(p + "attn.proj.w", d, d);
      lay.proj_b = zeros(p + "attn.proj.b", d);
      lay.ln2_g = ones(p + "ln2.g", d);
      lay.ln2_b = zeros(p + "ln2.b", d);
      lay.fc_w = w(p + "mlp.fc.w", d, cfg_.mlp_mult * d);
      lay.fc_b = zeros(p + "mlp.fc.b", cfg_.mlp_mult * d);
      lay.out_w = w(p + "mlp.out.w", cfg_.mlp_mult * d, d);
      lay.out_b = zeros(p + "mlp.out.b", d);
      layers_.push_back(lay);
    }
    lnf_g_ = ones("lnf.g", d);
    lnf_b_ = zeros("lnf.b", d);

    auto head = [&](const std::string& name, int64_t out_dim) {
      Head h;
      h.w = w("head." + name + ".w", d, 2 * out_dim);
      h.b = zeros("head." + name + ".b", 2 * out_dim);
      h.dim = out_dim;
      return h;
    };
    head_rtg_ = head("rtg", 1);
    head_ctg_ = head("ctg", 1);
    head_act_ = head("act", data::kActDim);
    head_ego_ = head("ego", env::kEgoDim);
    head_beam_ = head("beam", env::kBeamDim);
    head_nav_ = head("nav", env::kNavDim);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Parameter indices of the state encoder phi (block embedders + fusion map).
  std::vector<int> encoder_param_ids() const {
    return {embed_w_[kTokEgo], embed_b_[kTokEgo], embed_w_[kTokBeam], embed_b_[kTokBeam],
            embed_w_[kTokNav], embed_b_[kTokNav], fusion_w_, fusion_b_};
  }

  /// State encoder phi: per-block linear embeddings, gelu, linear fusion to
  /// the latent space. Inputs are [N, dim] blocks.
  ad::Var encode(ad::Tape& t, const std::vector<ad::Var>& p, ad::Var ego, ad::Var beam,
                 ad::Var nav) const {
    ad::Var ze = ad::add_bias(t, ad::matmul(t, ego, p[embed_w_[kTokEgo]]), p[embed_b_[kTokEgo]]);
    ad::Var zb =
        ad::add_bias(t, ad::matmul(t, beam, p[embed_w_[kTokBeam]]), p[embed_b_[kTokBeam]]);
    ad::Var zn = ad::add_bias(t, ad::matmul(t, nav, p[embed_w_[kTokNav]]), p[embed_b_[kTokNav]]);
    ad::Var h = ad::gelu(t, ad::concat_cols(t, {ze, zb, zn}));
    return ad::add_bias(t, ad::matmul(t, h, p[fusion_w_]), p[fusion_b_]);
  }

  /// Causal attention support over the flattened token stream: token (t, k)
  /// attends strictly earlier tokens plus itself; padded steps are masked as
  /// keys, and padded query rows keep only themselves to stay well-formed.
  ad::Array build_mask(const data::WindowBatch& wb) const {
    const int64_t B = wb.B, H = wb.H, S = kTokensPerStep * H;
    ad::Array mask = ad::Array::zeros({B * S, S});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < S; ++i) {
        double* row = mask.ptr() + (b * S + i) * S;
        const bool q_real = wb.pad[b * H + i / kTokensPerStep] > 0.5;
        if (!q_real) {
          row[i] = 1.0;
          continue;
        }
        for (int64_t j = 0; j <= i; ++j)
          if (wb.pad[b * H + j / kTokensPerStep] > 0.5) row[j] = 1.0;
      }
    return mask;
  }

  ModelOutput forward(ad::Tape& t, const std::vector<ad::Var>& p, const data::WindowBatch& wb,
                      bool train_mode = false, Rng* dropout_rng = nullptr,
                      bool want_attention = false) const {
    const int64_t B = wb.B, H = wb.H, d = cfg_.embed_dim;
    const int64_t S = kTokensPerStep * H, BH = B * H;
    check(H <= cfg_.context, "window longer than the model context");
    check(static_cast<int64_t>(wb.ego.size()) == BH * env::kEgoDim, "forward: ego block size");
    check(static_cast<int64_t>(wb.beam.size()) == BH * env::kBeamDim, "forward: beam block size");
    check(static_cast<int64_t>(wb.nav.size()) == BH * env::kNavDim, "forward: nav block size");
    const double rate = train_mode ? cfg_.dropout : 0.0;
    Rng fallback(0);
    Rng& drng = dropout_rng ? *dropout_rng : fallback;

    auto input = [&](const std::vector<double>& v, int64_t dim) {
      return t.constant(ad::Array::from({BH, dim}, v));
    };
    ad::Var in[kTokensPerStep] = {
        input(wb.act_prev, data::kActDim), input(wb.ctg_tok, 1), input(wb.rtg_tok, 1),
        input(wb.ego, env::kEgoDim),       input(wb.beam, env::kBeamDim),
        input(wb.nav, env::kNavDim)};

    std::vector<int64_t> time_idx(BH);
    for (int64_t i = 0; i < BH; ++i)
      time_idx[i] = std::min<int64_t>(wb.timestep[i], cfg_.max_timestep - 1);
    ad::Var time = ad::gather_rows(t, p[time_emb_], time_idx);

    std::vector<ad::Var> streams;
    for (int k = 0; k < kTokensPerStep; ++k)
      streams.push_back(ad::add(
          t, ad::add_bias(t, ad::matmul(t, in[k], p[embed_w_[k]]), p[embed_b_[k]]), time));

    // interleave the six per-modality streams into the flattened token order
    std::vector<int64_t> order(B * S);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t tt = 0; tt < H; ++tt)
        for (int64_t k = 0; k < kTokensPerStep; ++k)
          order[b * S + tt * kTokensPerStep + k] = k * BH + b * H + tt;
    ad::Var x = ad::gather_rows(t, ad::concat_rows(t, streams), order);
    x = ad::dropout(t, x, rate, drng);

    ModelOutput out;
    out.B = B;
    out.S = S;
    out.mask = build_mask(wb);
    ad::Array hmask = ad::Array::zeros({cfg_.heads * B * S, S});
    for (int64_t h = 0; h < cfg_.heads; ++h)
      std::copy(out.mask.ptr(), out.mask.ptr() + B * S * S, hmask.ptr() + h * B * S * S);

    const int64_t dh = d / cfg_.heads;
    for (const auto& lay : layers_) {
      ad::Var ln = ad::layer_norm(t, x, p[lay.ln1_g], p[lay.ln1_b]);
      ad::Var qkv = ad::add_bias(t, ad::matmul(t, ln, p[lay.qkv_w]), p[lay.qkv_b]);
      ad::Var q = ad::head_split(t, ad::slice_cols(t, qkv, 0, d), cfg_.heads);
      ad::Var k = ad::head_split(t, ad::slice_cols(t, qkv, d, 2 * d), cfg_.heads);
      ad::Var v = ad::head_split(t, ad::slice_cols(t, qkv, 2 * d, 3 * d), cfg_.heads);
      ad::Var scores =
          ad::scale(t, ad::bmm(t, q, k, cfg_.heads * B, S, dh, S, true), 1.0 / std::sqrt(double(dh)));
      ad::Var probs = ad::masked_softmax(t, scores, hmask);
      if (want_attention) out.attention.push_back(t.val(probs));
      probs = ad::dropout(t, probs, rate, drng);
      ad::Var ctx = ad::bmm(t, probs, v, cfg_.heads * B, S, S, dh, false);
      ad::Var merged = ad::head_merge(t, ctx, cfg_.heads);
      ad::Var attn = ad::add_bias(t, ad::matmul(t, merged, p[lay.proj_w]), p[lay.proj_b]);
      x = ad::add(t, x, ad::dropout(t, attn, rate, drng));

      ad::Var ln2 = ad::layer_norm(t, x, p[lay.ln2_g], p[lay.ln2_b]);
      ad::Var fc = ad::gelu(t, ad::add_bias(t, ad::matmul(t, ln2, p[lay.fc_w]), p[lay.fc_b]));
      ad::Var mlp = ad::add_bias(t, ad::matmul(t, fc, p[lay.out_w]), p[lay.out_b]);
      x = ad::add(t, x, ad::dropout(t, mlp, rate, drng));
    }
    x = ad::layer_norm(t, x, p[lnf_g_], p[lnf_b_]);

    auto read_positions = [&](int token_kind) {
      std::vector<int64_t> idx(BH);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t tt = 0; tt < H; ++tt)
          idx[b * H + tt] = b * S + tt * kTokensPerStep + token_kind;
      return ad::gather_rows(t, x, idx);
    };
    ad::Var h_act_prev = read_positions(kTokActPrev);  // -> ctg head
    ad::Var h_ctg = read_positions(kTokCtg);           // -> rtg head
    ad::Var h_nav = read_positions(kTokNav);           // -> action + dynamics heads

    auto apply_head = [&](const Head& h, ad::Var hidden) {
      ad::Var o = ad::add_bias(t, ad::matmul(t, hidden, p[h.w]), p[h.b]);
      return GaussianHead{ad::slice_cols(t, o, 0, h.dim), ad::slice_cols(t, o, h.dim, 2 * h.dim)};
    };
    out.ctg = apply_head(head_ctg_, h_act_prev);
    out.rtg = apply_head(head_rtg_, h_ctg);
    out.act = apply_head(head_act_, h_nav);
    out.ego = apply_head(head_ego_, h_nav);
    out.beam = apply_head(head_beam_, h_nav);
    out.nav = apply_head(head_nav_, h_nav);
    return out;
  }

  /// Trajectory loss of the world model: Gaussian NLLs for the return, cost,
  /// action, and pooled state-factor heads, averaged over unpadded positions.
  /// Disabled terms contribute no graph nodes, so their parameters receive
  /// exactly zero gradient.
  std::pair<ad::Var, LossBreakdown> traj_loss(ad::Tape& t, const ModelOutput& out,
                                              const data::WindowBatch& wb,
                                              const LossToggles& toggles = {}) const {
    const int64_t BH = wb.B * wb.H;
    LossBreakdown bd;
    std::vector<ad::Var> terms;

    auto repeat = [&](const std::vector<double>& w, int64_t dim) {
      ad::Array r = ad::Array::zeros({BH, dim});
      for (int64_t i = 0; i < BH; ++i)
        for (int64_t k = 0; k < dim; ++k) (*r.data)[i * dim + k] = w[i];
      return r;
    };
    const ad::Array w_pos = ad::Array::from({BH, 1}, wb.pad);

    if (toggles.rtg) {
      ad::Var l = ad::gaussian_nll(t, ad::Array::from({BH, 1}, wb.rtg_tgt), out.rtg.mu,
                                   out.rtg.log_sigma, &w_pos);
      bd.rtg = t.val(l).at(0);
      terms.push_back(l);
    }
    if (toggles.ctg) {
      ad::Var l = ad::gaussian_nll(t, ad::Array::from({BH, 1}, wb.ctg_tgt), out.ctg.mu,
                                   out.ctg.log_sigma, &w_pos);
      bd.ctg = t.val(l).at(0);
      terms.push_back(l);
    }
    if (toggles.act) {
      const ad::Array w2 = repeat(wb.pad, data::kActDim);
      ad::Var l = ad::gaussian_nll(t, ad::Array::from({BH, data::kActDim}, wb.act_tgt),
                                   out.act.mu, out.act.log_sigma, &w2);
      bd.act = t.val(l).at(0);
      terms.push_back(l);
    }
    if (toggles.dyn) {
      // factors keep separate heads; the loss pools their elements
      ad::Var mu = ad::concat_cols(t, {out.ego.mu, out.beam.mu, out.nav.mu});
      ad::Var ls =
          ad::concat_cols(t, {out.ego.log_sigma, out.beam.log_sigma, out.nav.log_sigma});
      std::vector<double> tgt(BH * env::kObsDim);
      for (int64_t i = 0; i < BH; ++i) {
        double* row = tgt.data() + i * env::kObsDim;
        for (int k = 0; k < env::kEgoDim; ++k) row[k] = wb.ego_next[i * env::kEgoDim + k];
        for (int k = 0; k < env::kBeamDim; ++k)
          row[env::kEgoDim + k] = wb.beam_next[i * env::kBeamDim + k];
        for (int k = 0; k < env::kNavDim; ++k)
          row[env::kEgoDim + env::kBeamDim + k] = wb.nav_next[i * env::kNavDim + k];
      }
      const ad::Array wd = repeat(wb.dyn_valid, env::kObsDim);
      ad::Var l = ad::gaussian_nll(t, ad::Array::from({BH, env::kObsDim}, std::move(tgt)), mu,
                                   ls, &wd);
      bd.dyn = t.val(l).at(0);
      terms.push_back(l);
    }
    check(!terms.empty(), "traj_loss: every term disabled");
    ad::Var total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = ad::add(t, total, terms[i]);
    bd.total = t.val(total).at(0);
    return {total, bd};
  }

 private:
  struct Layer {
    int ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    int ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
  };
  struct Head {
    int w = -1, b = -1;
    int64_t dim = 0;
  };

  ModelConfig cfg_;
  int embed_w_[kTokensPerStep], embed_b_[kTokensPerStep];
  int time_emb_, fusion_w_, fusion_b_;
  std::vector<Layer> layers_;
  int lnf_g_, lnf_b_;
  Head head_rtg_, head_ctg_, head_act_, head_ego_, head_beam_, head_nav_;
};

/// Attention statistics over rollout forwards: mean Shannon entropy of the
/// attention rows of real query tokens, and (optionally) the mean attention
/// matrix per layer accumulated over windows of a fixed token count.
struct AttentionStats {
  std::vector<double> sum;
  std::vector<int64_t> count;
  int64_t map_tokens = 0;  // accumulate mean maps for windows of this S (0 = off)
  std::vector<std::vector<double>> map_sums;
  int64_t map_count = 0;

  void add(const ModelOutput& out, const data::WindowBatch& wb, int64_t heads) {
    if (sum.size() < out.attention.size()) {
      sum.resize(out.attention.size(), 0.0);
      count.resize(out.attention.size(), 0);
    }
    const int64_t B = out.B, S = out.S;
    const int64_t H = wb.H;
    const bool take_maps = map_tokens > 0 && S == map_tokens;
    if (take_maps && map_sums.size() < out.attention.size())
      map_sums.resize(out.attention.size(), std::vector<double>(S * S, 0.0));
    for (size_t l = 0; l < out.attention.size(); ++l) {
      const ad::Array& P = out.attention[l];
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < S; ++i) {
            if (wb.pad[b * H + i / kTokensPerStep] < 0.5) continue;
            const double* row = P.ptr() + ((h * B + b) * S + i) * S;
            double e = 0;
            for (int64_t j = 0; j < S; ++j)
              if (row[j] > 0) e -= row[j] * std::log(row[j]);
            sum[l] += e;
            count[l] += 1;
            if (take_maps)
              for (int64_t j = 0; j < S; ++j) map_sums[l][i * S + j] += row[j];
          }
    }
    if (take_maps) map_count += heads * B;
  }

  std::vector<double> per_layer() const {
    std::vector<double> m(sum.size(), 0.0);
    for (size_t l = 0; l < sum.size(); ++l) m[l] = count[l] ? sum[l] / count[l] : 0.0;
    return m;
  }
  double overall() const {
    double s = 0;
    int64_t c = 0;
    for (size_t l = 0; l < sum.size(); ++l) {
      s += sum[l];
      c += count[l];
    }
    return c ? s / c : 0.0;
  }

  /// Mean attention matrices as JSON: one S x S row-major matrix per layer.
  json maps_json() const {
    json layers = json::array();
    for (const auto& m : map_sums) {
      const int64_t S = map_tokens;
      json rows = json::array();
      for (int64_t i = 0; i < S; ++i) {
        json row = json::array();
        for (int64_t j = 0; j < S; ++j)
          row.push_back(map_count ? m[i * S + j] / double(map_count) : 0.0);
        rows.push_back(std::move(row));
      }
      layers.push_back(std::move(rows));
    }
    return layers;
  }
};

using AttentionEntropy = AttentionStats;

}  // namespace fusion::model
