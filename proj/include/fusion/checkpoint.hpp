// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format: <prefix>.json manifest (names, shapes, hyperparameters,
// caller metadata) plus <prefix>.bin, a flat little-endian float64 blob in
// manifest order. Optimizer moments and RNG states ride along so training can
// resume exactly.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusion/autodiff.hpp"
#include "fusion/common.hpp"
#include "fusion/optim.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float64");

namespace fusion::ad {

using json = nlohmann::json;

namespace detail {

inline void write_doubles(std::ofstream& out, const double* p, size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, double* p, size_t n) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  check(static_cast<size_t>(in.gcount()) == n * sizeof(double), "checkpoint: blob truncated");
}

inline json optim_manifest(const OptimState& s) {
  return json{{"lr", s.lr}, {"beta1", s.beta1}, {"beta2", s.beta2},
              {"eps", s.eps}, {"step", s.step}, {"param_ids", s.param_ids}};
}

}  // namespace detail

struct Checkpoint {
  json extra;  // caller metadata (configs, dataset stats, rng states, ...)
  std::vector<OptimState*> optims;
};

inline void save_checkpoint(const std::string& prefix, const ParamStore& store,
                            const json& extra, const std::vector<const OptimState*>& optims = {}) {
  json manifest;
  manifest["format"] = "fusion-ckpt-v1";
  manifest["version"] = kVersion;
  json params = json::array();
  for (const auto& e : store.entries) params.push_back({{"name", e.name}, {"shape", e.value.shape}});
  manifest["params"] = std::move(params);
  json opt = json::array();
  for (const auto* o : optims) opt.push_back(detail::optim_manifest(*o));
  manifest["optims"] = std::move(opt);
  manifest["extra"] = extra;

  std::ofstream jf(prefix + ".json");
  check(jf.good(), "checkpoint: cannot open " + prefix + ".json");
  jf << manifest.dump(2) << "\n";
  check(jf.good(), "checkpoint: manifest write failed");

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  check(bf.good(), "checkpoint: cannot open " + prefix + ".bin");
  for (const auto& e : store.entries) detail::write_doubles(bf, e.value.ptr(), e.value.size());
  for (const auto* o : optims)
    for (size_t i = 0; i < o->m.size(); ++i) {
      detail::write_doubles(bf, o->m[i].data(), o->m[i].size());
      detail::write_doubles(bf, o->v[i].data(), o->v[i].size());
    }
  check(bf.good(), "checkpoint: blob write failed");
}

/// Loads parameters (and optional optimizer moments) written by
/// save_checkpoint. The store must already hold identically named and shaped
/// entries in the same order; returns the manifest's extra metadata.
inline json load_checkpoint(const std::string& prefix, ParamStore& store,
                            const std::vector<OptimState*>& optims = {}) {
  std::ifstream jf(prefix + ".json");
  check(jf.good(), "checkpoint: missing " + prefix + ".json");
  json manifest = json::parse(jf);
  check(manifest.value("format", "") == "fusion-ckpt-v1", "checkpoint: unknown format");
  const auto& params = manifest.at("params");
  check(params.size() == store.entries.size(), "checkpoint: parameter count mismatch");
  for (size_t i = 0; i < store.entries.size(); ++i) {
    check(params[i].at("name") == store.entries[i].name, "checkpoint: parameter name mismatch");
    const auto shape = params[i].at("shape").get<std::vector<int64_t>>();
    check(shape == store.entries[i].value.shape, "checkpoint: parameter shape mismatch");
  }
  std::ifstream bf(prefix + ".bin", std::ios::binary);
  check(bf.good(), "checkpoint: missing " + prefix + ".bin");
  for (auto& e : store.entries) detail::read_doubles(bf, e.value.ptr(), e.value.size());
  if (!optims.empty()) {
    const auto& om = manifest.at("optims");
    check(om.size() == optims.size(), "checkpoint: optimizer count mismatch");
    for (size_t k = 0; k < optims.size(); ++k) {
      OptimState& s = *optims[k];
      s.lr = om[k].at("lr");
      s.beta1 = om[k].at("beta1");
      s.beta2 = om[k].at("beta2");
      s.eps = om[k].at("eps");
      s.step = om[k].at("step");
      const auto ids = om[k].at("param_ids").get<std::vector<int>>();
      check(ids == s.param_ids, "checkpoint: optimizer parameter set mismatch");
      for (size_t i = 0; i < s.m.size(); ++i) {
        detail::read_doubles(bf, s.m[i].data(), s.m[i].size());
        detail::read_doubles(bf, s.v[i].data(), s.v[i].size());
      }
    }
  }
  return manifest.at("extra");
}

/// Reads just the manifest; used to reconstruct configs before building stores.
inline json load_checkpoint_manifest(const std::string& prefix) {
  std::ifstream jf(prefix + ".json");
  check(jf.good(), "checkpoint: missing " + prefix + ".json");
  return json::parse(jf);
}

}  // namespace fusion::ad
