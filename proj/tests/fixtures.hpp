// Copyright 2026 The AIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Randomized model/mask builders shared by unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "aim/masking.hpp"
#include "aim/model.hpp"
#include "aim/rng.hpp"
#include "aim/sensor_data.hpp"

namespace aim::testing {

inline ModelConfig tiny_model(std::size_t minutes, std::size_t channels, std::size_t patch, std::size_t embed,
                              std::size_t enc, std::size_t dec, std::size_t heads) {
  ModelConfig c;
  c.minutes = minutes;
  c.channels = channels;
  c.patch = patch;
  c.embed = embed;
  c.encoder_layers = enc;
  c.decoder_layers = dec;
  c.heads = heads;
  c.validate();
  return c;
}

// max |a - b| / max(max |b|, 1e-12)
inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0, m = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(a[i] - b[i]));
    m = std::max(m, std::abs(b[i]));
  }
  return d / m;
}

inline Tensor<double> random_values(std::size_t B, const TokenGrid& g, Rng& rng) {
  std::vector<double> v(B * g.minutes * g.channels);
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::from_data({B, g.minutes, g.channels}, std::move(v));
}

// Random inherited/artificial pair with at least one unmasked token.
struct MaskPair {
  TokenMask inherited;
  TokenMask artificial;
  std::size_t union_size() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < inherited.size(); ++i) n += inherited[i] || artificial[i];
    return n;
  }
};

inline MaskPair random_masks(std::size_t N, Rng& rng, double inh_density, double art_density) {
  MaskPair p{TokenMask(N, 0), TokenMask(N, 0)};
  for (std::size_t i = 0; i < N; ++i) {
    if (rng.bernoulli(inh_density)) {
      p.inherited[i] = 1;
    } else if (rng.bernoulli(art_density)) {
      p.artificial[i] = 1;
    }
  }
  const std::size_t free = rng.index(N);
  p.inherited[free] = 0;
  p.artificial[free] = 0;
  return p;
}

struct EquivalenceResult {
  double encoder_rel = 0;  // hybrid vs attention-only, unmasked tokens
  double recon_rel = 0;    // across drop partitions
};

// One randomized configuration: N <= 96, E <= 32, <= 2 encoder layers,
// random masks and drop partitions.
inline EquivalenceResult drop_equivalence_case(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "equivalence", 0);
  const std::size_t patch = 1 + rng.index(3);
  const std::size_t channels = 1 + rng.index(8);
  const std::size_t max_slots = std::max<std::size_t>(2, 96 / channels);
  const std::size_t slots = 2 + rng.index(std::min<std::size_t>(max_slots, 16) - 1);
  const std::size_t heads_opts[] = {1, 2, 4};
  const std::size_t heads = heads_opts[rng.index(3)];
  const std::size_t embed = heads * (2 + rng.index(32 / heads - 1));
  const auto cfg = tiny_model(slots * patch, channels, patch, embed, 1 + rng.index(2),
                              1 + rng.index(2), heads);
  const auto m = init_model<double>(cfg, seed);
  const TokenGrid g = cfg.grid();
  const std::size_t N = g.tokens(), B = 1 + rng.index(3);
  std::vector<MaskPair> masks;
  std::size_t min_union = N;
  for (std::size_t b = 0; b < B; ++b) {
    masks.push_back(random_masks(N, rng, rng.uniform(0.0, 0.4), rng.uniform(0.1, 0.7)));
    min_union = std::min(min_union, masks.back().union_size());
  }
  const std::size_t D = rng.index(min_union + 1);
  std::vector<MaskPlan> hybrid, hybrid2, attn;
  for (const auto& p : masks) {
    hybrid.push_back(build_mask_plan(p.inherited, p.artificial, D, rng));
    hybrid2.push_back(build_mask_plan(p.inherited, p.artificial, D, rng));
    attn.push_back(attention_only_plan(p.inherited, p.artificial));
  }
  const auto x = random_values(B, g, rng);
  const auto eh = encode(m, x, hybrid);
  const auto ea = encode(m, x, attn);
  const std::size_t E = cfg.embed, K = N - D;
  std::vector<double> a, b;
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t r = 0; r < K; ++r) {
      const std::size_t tok = hybrid[s].keep_idx[r];
      if (hybrid[s].union_mask[tok]) continue;
      for (std::size_t e = 0; e < E; ++e) {
        a.push_back(eh.kept.data()[(s * K + r) * E + e]);
        b.push_back(ea.kept.data()[(s * N + tok) * E + e]);
      }
    }
  EquivalenceResult out;
  out.encoder_rel = max_rel_diff(a, b);
  const auto r0 = decode_reconstruct(m, ea);
  const auto r1 = decode_reconstruct(m, eh);
  const auto r2 = reconstruct(m, x, hybrid2);
  out.recon_rel = std::max(max_rel_diff(r1.data(), r0.data()), max_rel_diff(r2.data(), r0.data()));
  return out;
}

// Small standardized synthetic dataset: 48 min x 8 channels, patch 4.
// missing = false gives fully observed records.
inline Dataset small_dataset(std::size_t records, std::uint64_t seed, bool missing = true) {
  GeneratorConfig g;
  g.records = records;
  g.minutes = 48;
  g.channels = 8;
  g.patch = 4;
  g.profile = MissingnessProfile::for_day_length(48);
  if (!missing) g.profile.forced_target = 0.0;
  auto ds = generate_synthetic(g, seed);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return standardize(ds, all);
}

inline ModelConfig small_model() { return tiny_model(48, 8, 4, 16, 1, 1, 2); }

}  // namespace aim::testing
