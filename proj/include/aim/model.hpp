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

// The masked-autoencoder transformer. Tokens are per-channel patches embedded
// by one shared linear kernel plus a summed (time-slot, channel) positional
// table. The encoder sees only kept tokens; masked tokens that survive the
// drop are replaced by the mask token and hidden from attention. The decoder
// reinserts every masked position as the mask token and reconstructs all
// pixels.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "aim/errors.hpp"
#include "aim/masking.hpp"
#include "aim/rng.hpp"
#include "aim/tensor.hpp"
#include "json.hpp"

namespace aim {

struct ModelConfig {
  std::size_t minutes = 1440;
  std::size_t channels = 26;
  std::size_t patch = 10;
  std::size_t embed = 384;
  std::size_t encoder_layers = 12;
  std::size_t decoder_layers = 4;
  std::size_t heads = 6;
  std::size_t decoder_width = 0;  // 0 means "same as embed"
  std::size_t decoder_heads = 0;  // 0 means "same as heads"
  std::size_t mlp_ratio = 4;

  std::size_t dec_width() const { return decoder_width ? decoder_width : embed; }
  std::size_t dec_heads() const { return decoder_heads ? decoder_heads : heads; }
  TokenGrid grid() const { return TokenGrid::make(minutes, channels, patch); }

  void validate() const {
    if (!minutes || !channels || !patch || !embed || !encoder_layers || !decoder_layers || !heads || !mlp_ratio) {
      throw ConfigError("model sizes must be positive");
    }
    if (minutes % patch) throw ConfigError("model.minutes must be a multiple of model.patch");
    if (embed % heads) throw ConfigError("model.embed must be divisible by model.heads");
    if (dec_width() % dec_heads()) throw ConfigError("decoder width must be divisible by decoder heads");
  }

  nlohmann::json to_json() const {
    return {{"minutes", minutes},         {"channels", channels},           {"patch", patch},
            {"embed", embed},             {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
            {"heads", heads},             {"decoder_width", dec_width()},    {"decoder_heads", dec_heads()},
            {"mlp_ratio", mlp_ratio}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.minutes = j.at("minutes");
    c.channels = j.at("channels");
    c.patch = j.at("patch");
    c.embed = j.at("embed");
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.heads = j.at("heads");
    c.decoder_width = j.at("decoder_width");
    c.decoder_heads = j.at("decoder_heads");
    c.mlp_ratio = j.at("mlp_ratio");
    return c;
  }
};

template <class S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]

  Tensor<S> operator()(const Tensor<S>& x) const { return add(matmul(x, weight), bias); }
};

template <class S>
struct Norm {
  Tensor<S> gamma;
  Tensor<S> beta;

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }
};

template <class S>
struct Block {
  Norm<S> ln1;
  Linear<S> q, k, v, o;
  Norm<S> ln2;
  Linear<S> fc1, fc2;
};

template <class S>
struct NamedParam {
  std::string name;
  Tensor<S>* tensor;
  bool decay;  // decoupled weight decay applies
};

template <class S>
struct ModelParams {
  ModelConfig config;
  Linear<S> patch_kernel;     // P -> E
  Tensor<S> slot_table;       // [T/P, E]
  Tensor<S> channel_table;    // [S, E]
  Tensor<S> mask_token;       // [E]
  std::vector<Block<S>> encoder;
  Norm<S> encoder_norm;
  Linear<S> decoder_embed;    // E -> Ed
  std::vector<Block<S>> decoder;
  Norm<S> decoder_norm;
  Linear<S> recon_head;       // Ed -> P

  // Stable order shared by the optimizer and checkpoints.
  std::vector<NamedParam<S>> named() {
    std::vector<NamedParam<S>> out;
    auto lin = [&](const std::string& n, Linear<S>& l) {
      out.push_back({n + ".weight", &l.weight, true});
      out.push_back({n + ".bias", &l.bias, false});
    };
    auto norm = [&](const std::string& n, Norm<S>& l) {
      out.push_back({n + ".gamma", &l.gamma, false});
      out.push_back({n + ".beta", &l.beta, false});
    };
    auto block = [&](const std::string& n, Block<S>& b) {
      norm(n + ".ln1", b.ln1);
      lin(n + ".q", b.q);
      lin(n + ".k", b.k);
      lin(n + ".v", b.v);
      lin(n + ".o", b.o);
      norm(n + ".ln2", b.ln2);
      lin(n + ".fc1", b.fc1);
      lin(n + ".fc2", b.fc2);
    };
    lin("patch_kernel", patch_kernel);
    out.push_back({"pos.slot_table", &slot_table, false});
    out.push_back({"pos.channel_table", &channel_table, false});
    out.push_back({"mask_token", &mask_token, false});
    for (std::size_t i = 0; i < encoder.size(); ++i) block("encoder." + std::to_string(i), encoder[i]);
    norm("encoder_norm", encoder_norm);
    lin("decoder_embed", decoder_embed);
    for (std::size_t i = 0; i < decoder.size(); ++i) block("decoder." + std::to_string(i), decoder[i]);
    norm("decoder_norm", decoder_norm);
    lin("recon_head", recon_head);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : named()) n += p.tensor->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : named()) p.tensor->zero_grad();
  }

  ModelParams clone() {
    ModelParams out = *this;
    auto src = named();
    auto dst = out.named();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->detach(src[i].tensor->requires_grad());
    return out;
  }
};

namespace detail {

template <class S>
Tensor<S> trunc_normal(Shape shape, Rng& rng, double std = 0.02) {
  std::vector<S> d(numel(shape));
  for (auto& v : d) v = static_cast<S>(rng.truncated_normal(0.0, std, -2.0 * std, 2.0 * std));
  return Tensor<S>::from_data(std::move(shape), std::move(d), true);
}

template <class S>
Linear<S> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {trunc_normal<S>({in, out}, rng), Tensor<S>::zeros({out}, true)};
}

template <class S>
Norm<S> init_norm(std::size_t width) {
  return {Tensor<S>::full({width}, S(1), true), Tensor<S>::zeros({width}, true)};
}

template <class S>
Block<S> init_block(std::size_t width, std::size_t ratio, Rng& rng) {
  Block<S> b;
  b.ln1 = init_norm<S>(width);
  b.q = init_linear<S>(width, width, rng);
  b.k = init_linear<S>(width, width, rng);
  b.v = init_linear<S>(width, width, rng);
  b.o = init_linear<S>(width, width, rng);
  b.ln2 = init_norm<S>(width);
  b.fc1 = init_linear<S>(width, ratio * width, rng);
  b.fc2 = init_linear<S>(ratio * width, width, rng);
  return b;
}

}  // namespace detail

template <class S>
ModelParams<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "init");
  const std::size_t E = cfg.embed, Ed = cfg.dec_width(), slots = cfg.minutes / cfg.patch;
  ModelParams<S> m;
  m.config = cfg;
  m.patch_kernel = detail::init_linear<S>(cfg.patch, E, rng);
  std::vector<S> sin_table(slots * E);
  for (std::size_t k = 0; k < slots; ++k) {
    for (std::size_t i = 0; i < E; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(E));
      const double a = static_cast<double>(k) * freq;
      sin_table[k * E + i] = static_cast<S>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  m.slot_table = Tensor<S>::from_data({slots, E}, std::move(sin_table), true);
  std::vector<S> ch(cfg.channels * E);
  for (auto& v : ch) v = static_cast<S>(rng.normal(0.0, 0.02));
  m.channel_table = Tensor<S>::from_data({cfg.channels, E}, std::move(ch), true);
  m.mask_token = detail::trunc_normal<S>({E}, rng);
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) m.encoder.push_back(detail::init_block<S>(E, cfg.mlp_ratio, rng));
  m.encoder_norm = detail::init_norm<S>(E);
  m.decoder_embed = detail::init_linear<S>(E, Ed, rng);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) m.decoder.push_back(detail::init_block<S>(Ed, cfg.mlp_ratio, rng));
  m.decoder_norm = detail::init_norm<S>(Ed);
  m.recon_head = detail::init_linear<S>(Ed, cfg.patch, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Forward building blocks.

// Pre-norm transformer block. key_mask: [B,1,1,L] additive mask or undefined.
template <class S>
Tensor<S> transformer_block(const Block<S>& blk, const Tensor<S>& x, std::size_t heads,
                            const std::type_identity_t<std::optional<Tensor<S>>>& key_mask) {
  const std::size_t d = x.dim(2) / heads;
  Tensor<S> h = blk.ln1(x);
  Tensor<S> q = split_heads(blk.q(h), heads);
  Tensor<S> k = split_heads(blk.k(h), heads);
  Tensor<S> v = split_heads(blk.v(h), heads);
  Tensor<S> scores = scale(matmul(q, k, true), static_cast<S>(1.0 / std::sqrt(static_cast<double>(d))));
  Tensor<S> attn = softmax_lastdim(scores, key_mask);
  Tensor<S> ctx = merge_heads(matmul(attn, v));
  Tensor<S> y = add(x, blk.o(ctx));
  return add(y, blk.fc2(gelu(blk.fc1(blk.ln2(y)))));
}

// Full positional table [N, E]: row n = slot_table[n % slots] + channel_table[n / slots].
template <class S>
Tensor<S> positional_table(const ModelParams<S>& m) {
  const TokenGrid grid = m.config.grid();
  RowIndex slot_idx(grid.tokens()), chan_idx(grid.tokens());
  for (std::size_t n = 0; n < grid.tokens(); ++n) {
    slot_idx[n] = grid.slot_of(n);
    chan_idx[n] = grid.channel_of(n);
  }
  return add(gather_rows(m.slot_table, slot_idx), gather_rows(m.channel_table, chan_idx));
}

// [B, 1, 1, K] additive key mask; -LARGE at placeholder positions.
template <class S>
Tensor<S> key_mask_from(const RowMask& placeholders, std::size_t batch, std::size_t kept) {
  std::vector<S> m(batch * kept, S(0));
  for (std::size_t i = 0; i < m.size(); ++i)
    if (placeholders[i]) m[i] = static_cast<S>(kMaskNegative);
  return Tensor<S>::from_data({batch, 1, 1, kept}, std::move(m));
}

// Raw values [B,T,S] times the observed bitmap, so unobserved pixels are zero
// and carry no gradient.
template <class S>
Tensor<S> zero_fill(const Tensor<S>& values, const std::vector<std::uint8_t>& observed) {
  if (observed.size() != values.size()) throw DimensionError("observed bitmap does not match values");
  std::vector<S> m(observed.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = observed[i] ? S(1) : S(0);
  return mul(values, Tensor<S>::from_data(values.shape(), std::move(m)));
}

template <class S>
struct EncoderOutput {
  Tensor<S> kept;          // [B, K, E]
  BatchRowIndex keep_idx;  // token index of each kept row
  RowMask placeholders;    // [B*K], 1 where the kept row is a mask placeholder
  std::size_t batch() const { return keep_idx.size(); }
};

// Token embeddings for the kept rows: [B, K, E].
template <class S>
Tensor<S> tokenize(const ModelParams<S>& m, const Tensor<S>& filled, const BatchRowIndex& keep,
                   const RowMask& placeholders) {
  const auto& cfg = m.config;
  if (filled.rank() != 3 || filled.dim(1) != cfg.minutes || filled.dim(2) != cfg.channels) {
    throw ContractViolation("input " + shape_str(filled.shape()) + " does not match the model grid " +
                            std::to_string(cfg.minutes) + "x" + std::to_string(cfg.channels));
  }
  if (keep.size() != filled.dim(0)) throw ContractViolation("one keep list per sample is required");
  Tensor<S> patches = gather_rows(patchify(filled, cfg.patch), keep);
  Tensor<S> emb = fill_rows(m.patch_kernel(patches), m.mask_token, placeholders);
  return add(emb, gather_rows(positional_table(m), keep));
}

template <class S>
EncoderOutput<S> encode_tokens(const ModelParams<S>& m, const Tensor<S>& filled, const BatchRowIndex& keep,
                               const RowMask& placeholders) {
  const std::size_t B = keep.size(), K = keep.at(0).size();
  if (placeholders.size() != B * K) throw ContractViolation("placeholder mask length does not match kept rows");
  Tensor<S> x = tokenize(m, filled, keep, placeholders);
  bool any = false;
  for (auto p : placeholders) any = any || p;
  std::optional<Tensor<S>> km;
  if (any) km = key_mask_from<S>(placeholders, B, K);
  for (const auto& blk : m.encoder) x = transformer_block(blk, x, m.config.heads, km);
  return {m.encoder_norm(x), keep, placeholders};
}

namespace detail {
inline void check_plans(const std::vector<MaskPlan>& plans, std::size_t tokens) {
  if (plans.empty()) throw ContractViolation("empty batch");
  const std::size_t k = plans[0].keep_idx.size();
  for (const auto& p : plans) {
    if (p.tokens() != tokens) throw ContractViolation("mask plan does not match the token grid");
    if (p.keep_idx.size() != k) throw ContractViolation("plans in one batch must drop the same number of tokens");
  }
}
}  // namespace detail

// filled: [B, T, S] zero-filled standardized values.
template <class S>
EncoderOutput<S> encode(const ModelParams<S>& m, const Tensor<S>& filled, const std::vector<MaskPlan>& plans) {
  detail::check_plans(plans, m.config.grid().tokens());
  BatchRowIndex keep;
  RowMask ph;
  for (const auto& p : plans) {
    keep.push_back(p.keep_idx);
    for (auto i : p.keep_idx) ph.push_back(p.union_mask[i]);
  }
  return encode_tokens(m, filled, keep, ph);
}

// Reconstruction [B, T, S] in standardized space.
template <class S>
Tensor<S> decode_reconstruct(const ModelParams<S>& m, const EncoderOutput<S>& enc) {
  const auto& cfg = m.config;
  const std::size_t B = enc.batch(), N = cfg.grid().tokens(), E = cfg.embed;
  Tensor<S> z = fill_rows(enc.kept, m.mask_token, enc.placeholders);
  Tensor<S> base = add(Tensor<S>::zeros({B, N, E}), m.mask_token);
  Tensor<S> full = add(scatter_rows(z, enc.keep_idx, base), positional_table(m));
  Tensor<S> y = m.decoder_embed(full);
  for (const auto& blk : m.decoder) y = transformer_block(blk, y, cfg.dec_heads(), std::nullopt);
  y = m.recon_head(m.decoder_norm(y));
  return unpatchify(y, cfg.minutes, cfg.channels);
}

template <class S>
Tensor<S> reconstruct(const ModelParams<S>& m, const Tensor<S>& filled, const std::vector<MaskPlan>& plans) {
  return decode_reconstruct(m, encode(m, filled, plans));
}

// Mean encoder output over non-inherited tokens, with nothing dropped and
// only the inherited mask applied. inherited: one mask per sample. -> [B, E]
template <class S>
Tensor<S> pool_embedding(const ModelParams<S>& m, const Tensor<S>& filled, const std::vector<TokenMask>& inherited) {
  const std::size_t N = m.config.grid().tokens();
  std::vector<MaskPlan> plans;
  RowMask include;
  for (std::size_t b = 0; b < inherited.size(); ++b) {
    const auto& inh = inherited[b];
    if (inh.size() != N) throw ContractViolation("inherited mask length does not match grid");
    if (std::all_of(inh.begin(), inh.end(), [](auto v) { return v != 0; })) {
      throw MaskingError("sample " + std::to_string(b) + " has every token inherited-masked; nothing to pool");
    }
    plans.push_back(attention_only_plan(inh, TokenMask(N, 0)));
    for (auto v : inh) include.push_back(v ? 0 : 1);
  }
  EncoderOutput<S> enc = encode(m, filled, plans);
  return masked_mean_rows(enc.kept, include);
}

// ---------------------------------------------------------------------------
// Cost model.

struct EncoderFlops {
  double projections = 0;  // Q, K, V, output
  double attention_scores = 0;  // Q K^T
  double attention_values = 0;  // softmax(.) V
  double mlp = 0;
  double total() const { return projections + attention_scores + attention_values + mlp; }
};

// Multiply-add counted as 2 FLOPs, per sample, for `layers` encoder layers
// over a sequence of `tokens` rows.
inline EncoderFlops encoder_flops(std::size_t tokens, std::size_t embed, std::size_t mlp_ratio, std::size_t layers) {
  const double L = static_cast<double>(tokens), E = static_cast<double>(embed), Ly = static_cast<double>(layers);
  EncoderFlops f;
  f.projections = Ly * 4.0 * 2.0 * L * E * E;
  f.attention_scores = Ly * 2.0 * L * L * E;
  f.attention_values = Ly * 2.0 * L * L * E;
  f.mlp = Ly * 2.0 * 2.0 * L * E * E * static_cast<double>(mlp_ratio);
  return f;
}

// Wall time (best of `repeats`, seconds) of one encoder layer forward pass
// over `tokens - dropped` rows for a single sample, without autodiff. One
// untimed pass warms the allocator and caches first.
template <class S>
double time_encoder_layer(std::size_t tokens, std::size_t dropped, std::size_t embed, std::size_t heads,
                          std::size_t mlp_ratio, std::size_t repeats, std::uint64_t seed) {
  if (dropped >= tokens) throw ConfigError("cannot drop every token");
  NoGradGuard ng;
  Rng rng = Rng::stream(seed, "bench", tokens * 1000003 + dropped);
  Block<S> blk = detail::init_block<S>(embed, mlp_ratio, rng);
  const std::size_t k = tokens - dropped;
  std::vector<S> x(k * embed);
  for (auto& v : x) v = static_cast<S>(rng.normal());
  Tensor<S> in = Tensor<S>::from_data({1, k, embed}, x);
  transformer_block(blk, in, heads, std::nullopt);
  double best = 0;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<S> y = transformer_block(blk, in, heads, std::nullopt);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r == 0 || dt < best) best = dt;
  }
  return best;
}

}  // namespace aim
