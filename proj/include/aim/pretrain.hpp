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

// Pre-training: masked reconstruction loss over artificially masked observed
// pixels, AdamW with warmup + cosine decay and global-norm clipping, periodic
// checkpoints and the two ablations (no inherited masks, no strategy mixing).

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "aim/checkpoint.hpp"
#include "aim/errors.hpp"
#include "aim/imputers.hpp"
#include "aim/masking.hpp"
#include "aim/model.hpp"
#include "aim/rng.hpp"
#include "aim/runtime.hpp"
#include "aim/sensor_data.hpp"
#include "aim/tensor.hpp"
#include "json.hpp"

namespace aim {

enum class Ablation { kFullAim, kNoInheritance, kNoMixing };

inline std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFullAim: return "full_aim";
    case Ablation::kNoInheritance: return "no_inheritance";
    case Ablation::kNoMixing: return "no_mixing";
  }
  return "unknown";
}

inline Ablation parse_ablation(std::string_view s) {
  for (auto a : {Ablation::kFullAim, Ablation::kNoInheritance, Ablation::kNoMixing})
    if (ablation_name(a) == s) return a;
  throw ConfigError("unknown ablation '" + std::string(s) + "'");
}

struct TrainConfig {
  double base_lr = 5e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double grad_clip = 1.0;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::kFullAim;
  // 0 selects every 10% of total_steps.
  std::size_t checkpoint_every = 0;

  std::size_t checkpoint_interval() const {
    if (checkpoint_every) return checkpoint_every;
    return std::max<std::size_t>(1, (total_steps + 9) / 10);
  }

  void validate() const {
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(base_lr >= 0) || !(weight_decay >= 0) || !(grad_clip > 0)) {
      throw ConfigError("train.base_lr and train.weight_decay must be >= 0 and train.grad_clip > 0");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) throw ConfigError("invalid AdamW betas/eps");
  }

  nlohmann::json to_json() const {
    return {{"base_lr", base_lr},         {"weight_decay", weight_decay},       {"beta1", beta1},
            {"beta2", beta2},             {"eps", eps},                         {"grad_clip", grad_clip},
            {"warmup_fraction", warmup_fraction}, {"total_steps", total_steps}, {"batch_size", batch_size},
            {"seed", seed},               {"ablation", ablation_name(ablation)}, {"checkpoint_every", checkpoint_every}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.base_lr = j.at("base_lr");
    c.weight_decay = j.at("weight_decay");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.eps = j.at("eps");
    c.grad_clip = j.at("grad_clip");
    c.warmup_fraction = j.at("warmup_fraction");
    c.total_steps = j.at("total_steps");
    c.batch_size = j.at("batch_size");
    c.seed = j.at("seed");
    c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    c.checkpoint_every = j.at("checkpoint_every");
    return c;
  }
};

inline nlohmann::json masking_to_json(const MaskingConfig& m) {
  nlohmann::json mix = nlohmann::json::array();
  for (const auto& e : m.mix) mix.push_back({{"strategy", strategy_name(e.strategy)}, {"ratio", e.ratio}});
  return {{"mix", mix}, {"drop_fraction", m.drop_fraction}, {"tau", m.tau}};
}

inline MaskingConfig masking_from_json(const nlohmann::json& j) {
  MaskingConfig m;
  m.mix.clear();
  for (const auto& e : j.at("mix")) m.mix.push_back({parse_strategy(e.at("strategy").get<std::string>()), e.at("ratio")});
  m.drop_fraction = j.at("drop_fraction");
  m.tau = j.at("tau");
  return m;
}

inline nlohmann::json standardization_to_json(const Standardization& s) {
  return {{"mean", s.mean}, {"std", s.stddev}};
}

inline Standardization standardization_from_json(const nlohmann::json& j) {
  Standardization s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  return s;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer.

inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw ContractViolation("lr_at step beyond total_steps");
  const double total = static_cast<double>(cfg.total_steps);
  const double warm = cfg.warmup_fraction * total;
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.base_lr * s / warm;
  if (total <= warm) return cfg.base_lr;
  const double progress = (s - warm) / (total - warm);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class S>
struct OptimizerState {
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
  std::size_t step = 0;
};

template <class S>
OptimizerState<S> init_optimizer(ModelParams<S>& params) {
  OptimizerState<S> st;
  for (auto& p : params.named()) {
    st.m.emplace_back(p.tensor->size(), S(0));
    st.v.emplace_back(p.tensor->size(), S(0));
  }
  return st;
}

struct StepStats {
  double grad_norm = 0;
  double clip_scale = 1;
};

// One AdamW update over `params` using their accumulated gradients (a
// parameter without a gradient is treated as having a zero gradient).
template <class S>
StepStats adamw_step(std::vector<NamedParam<S>> params, OptimizerState<S>& st, double lr, const TrainConfig& cfg) {
  if (st.m.size() != params.size() || st.v.size() != params.size()) {
    throw ContractViolation("optimizer state does not match the parameter list");
  }
  StepStats stats;
  double sq = 0;
  for (auto& p : params) {
    for (S g : p.tensor->grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  stats.grad_norm = std::sqrt(sq);
  if (stats.grad_norm > cfg.grad_clip) stats.clip_scale = cfg.grad_clip / stats.grad_norm;
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(cfg.eps);
  const S clip = static_cast<S>(stats.clip_scale);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (st.m[i].size() != p.tensor->size()) throw ContractViolation("moment shape mismatch for '" + p.name + "'");
    auto w = p.tensor->mutable_data();
    auto g = p.tensor->grad();
    const bool has = !g.empty();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const S decay = p.decay ? static_cast<S>(1.0 - lr * cfg.weight_decay) : S(1);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const S gk = has ? g[k] * clip : S(0);
      m[k] = b1 * m[k] + (S(1) - b1) * gk;
      v[k] = b2 * v[k] + (S(1) - b2) * gk * gk;
      w[k] = w[k] * decay - step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Loss.

// Per-pixel weights [B*T*S]: 1 on observed pixels of artificially masked
// tokens, 0 elsewhere. Returns the number of counted pixels.
template <class S>
std::size_t loss_weights(const std::vector<MaskPlan>& plans, const std::vector<std::uint8_t>& observed,
                         const TokenGrid& grid, std::vector<S>& out) {
  const std::size_t T = grid.minutes, C = grid.channels, cells = T * C;
  if (observed.size() != plans.size() * cells) throw DimensionError("observed bitmap does not match the batch");
  out.assign(observed.size(), S(0));
  std::size_t n = 0;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    const auto& art = plans[b].artificial;
    if (art.size() != grid.tokens()) throw ContractViolation("plan does not match the token grid");
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = b * cells + t * C + c;
        if (observed[k] && art[grid.index(c, t / grid.patch)]) {
          out[k] = S(1);
          ++n;
        }
      }
  }
  return n;
}

// Mean squared error over {artificially masked} x {observed} pixels of the
// whole batch. pred, target: [B, T, S].
template <class S>
Tensor<S> reconstruction_loss(const Tensor<S>& pred, const Tensor<S>& target, const std::vector<MaskPlan>& plans,
                              const std::vector<std::uint8_t>& observed, const TokenGrid& grid) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("prediction " + shape_str(pred.shape()) + " and target " + shape_str(target.shape()));
  }
  std::vector<S> w;
  const std::size_t n = loss_weights(plans, observed, grid, w);
  Tensor<S> sq = mul(square(sub(pred, target)), Tensor<S>::from_data(pred.shape(), std::move(w)));
  if (n == 0) {
    std::clog << "warning: no artificially masked observed pixels in batch; loss is 0\n";
    return scale(sum(sq), S(0));
  }
  return scale(sum(sq), static_cast<S>(1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Batches.

template <class S>
struct TrainingBatch {
  Tensor<S> input;                         // [B, T, S] values fed to the tokenizer
  std::vector<std::uint8_t> input_observed;  // zero-fill bitmap for `input`
  Tensor<S> target;                        // [B, T, S] standardized ground truth
  std::vector<std::uint8_t> target_observed;
  std::vector<MaskPlan> plans;
};

// Builds inputs, targets and mask plans for records `idx` of a standardized
// dataset. Under no_inheritance the inherited mask is empty and the input is
// linearly imputed after hiding every masked pixel, so no hidden value leaks.
template <class S>
TrainingBatch<S> assemble_batch(const Dataset& ds, const std::vector<std::size_t>& idx, const TokenGrid& grid,
                                const MaskingConfig& mcfg, Ablation ablation, Rng& rng) {
  const std::size_t T = grid.minutes, C = grid.channels, cells = T * C, B = idx.size();
  MaskingConfig cfg = mcfg;
  if (ablation == Ablation::kNoMixing) cfg.mix = {{Strategy::kRandomImputation, 0.8}};
  const std::size_t D = cfg.drop_count(grid.tokens());
  TrainingBatch<S> batch;
  std::vector<S> in(B * cells), tg(B * cells);
  batch.input_observed.resize(B * cells);
  batch.target_observed.resize(B * cells);
  for (std::size_t b = 0; b < B; ++b) {
    const SensorRecord& r = ds.records.at(idx[b]);
    if (r.minutes != T || r.channels != C) throw ContractViolation("record " + r.id + " does not match the token grid");
    TokenMask inherited = ablation == Ablation::kNoInheritance ? TokenMask(grid.tokens(), 0)
                                                                : derive_inherited_mask(r, grid, cfg.tau);
    const auto& e = draw_strategy(cfg, rng);
    TokenMask art = sample_artificial_mask(e.strategy, e.ratio, inherited, grid, rng);
    batch.plans.push_back(build_mask_plan(inherited, art, D, rng, e.strategy));
    for (std::size_t k = 0; k < cells; ++k) {
      tg[b * cells + k] = static_cast<S>(r.values[k]);
      batch.target_observed[b * cells + k] = r.observed[k];
    }
    if (ablation == Ablation::kNoInheritance) {
      std::vector<std::uint8_t> visible = r.observed;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
          if (art[grid.index(c, t / grid.patch)]) visible[t * C + c] = 0;
      auto filled = impute_linear(r.values, visible, T, C);
      for (std::size_t k = 0; k < cells; ++k) {
        in[b * cells + k] = static_cast<S>(filled[k]);
        batch.input_observed[b * cells + k] = 1;
      }
    } else {
      for (std::size_t k = 0; k < cells; ++k) {
        in[b * cells + k] = static_cast<S>(r.values[k]);
        batch.input_observed[b * cells + k] = r.observed[k];
      }
    }
  }
  batch.input = Tensor<S>::from_data({B, T, C}, std::move(in));
  batch.target = Tensor<S>::from_data({B, T, C}, std::move(tg));
  return batch;
}

template <class S>
Tensor<S> batch_loss(const ModelParams<S>& m, const TrainingBatch<S>& batch) {
  Tensor<S> pred = reconstruct(m, zero_fill(batch.input, batch.input_observed), batch.plans);
  return reconstruction_loss(pred, batch.target, batch.plans, batch.target_observed, m.config.grid());
}

// ---------------------------------------------------------------------------
// Training loop and checkpoints.

struct LossPoint {
  std::size_t step;
  double lr;
  double loss;
};

template <class S>
struct TrainState {
  ModelParams<S> model;
  OptimizerState<S> optimizer;
  std::size_t step = 0;
  std::vector<LossPoint> curve;
};

// Non-array content of a checkpoint.
struct RunInfo {
  TrainConfig train;
  MaskingConfig masking;
  Standardization standardization;
  nlohmann::json extra = nlohmann::json::object();
};

template <class S>
TrainState<S> init_train_state(const ModelConfig& mc, std::uint64_t seed) {
  TrainState<S> st;
  st.model = init_model<S>(mc, seed);
  st.optimizer = init_optimizer(st.model);
  return st;
}

template <class S>
void save_checkpoint(const std::filesystem::path& dir, TrainState<S>& st, const RunInfo& info) {
  CheckpointWriter w;
  auto named = st.model.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    w.add(named[i].name, *named[i].tensor);
    w.add<S>("adam.m." + named[i].name, named[i].tensor->shape(), st.optimizer.m[i]);
    w.add<S>("adam.v." + named[i].name, named[i].tensor->shape(), st.optimizer.v[i]);
  }
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : st.curve) curve.push_back({p.step, p.lr, p.loss});
  nlohmann::json meta{{"model", st.model.config.to_json()},
                      {"masking", masking_to_json(info.masking)},
                      {"train", info.train.to_json()},
                      {"standardization", standardization_to_json(info.standardization)},
                      {"step", st.step},
                      {"optimizer_step", st.optimizer.step},
                      {"dtype", dtype_name<S>()},
                      {"loss_curve", curve},
                      {"extra", info.extra}};
  w.write(dir, meta);
}

// Loads into a model built from `expected` (or the stored config when
// unset); the first parameter whose shape disagrees is named in the error.
template <class S>
TrainState<S> load_checkpoint(const std::filesystem::path& dir, RunInfo* info = nullptr,
                              std::optional<ModelConfig> expected = std::nullopt) {
  CheckpointReader r(dir);
  const auto& meta = r.meta();
  ModelConfig mc = expected ? *expected : ModelConfig::from_json(meta.at("model"));
  TrainState<S> st = init_train_state<S>(mc, 0);
  auto named = st.model.named();
  const bool with_moments = r.has("adam.m." + named[0].name);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto vals = r.read<S>(named[i].name, named[i].tensor->shape());
    std::copy(vals.begin(), vals.end(), named[i].tensor->mutable_data().begin());
    if (with_moments) {
      st.optimizer.m[i] = r.read<S>("adam.m." + named[i].name, named[i].tensor->shape());
      st.optimizer.v[i] = r.read<S>("adam.v." + named[i].name, named[i].tensor->shape());
    }
  }
  st.step = meta.at("step");
  st.optimizer.step = meta.at("optimizer_step");
  for (const auto& p : meta.at("loss_curve")) st.curve.push_back({p.at(0), p.at(1), p.at(2)});
  if (info) {
    info->train = TrainConfig::from_json(meta.at("train"));
    info->masking = masking_from_json(meta.at("masking"));
    info->standardization = standardization_from_json(meta.at("standardization"));
    info->extra = meta.at("extra");
  }
  return st;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path, std::ios::trunc);
  out << "step,lr,loss\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", p.step, p.lr, p.loss);
    out << buf;
  }
  if (!out) throw Error("cannot write " + path.string());
}

inline std::string checkpoint_dir_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06zu", step);
  return buf;
}

struct TrainOptions {
  // Checkpoints and loss.csv go here when set.
  std::optional<std::filesystem::path> out_dir;
  RunInfo info;
  // Stop (without finishing the schedule) once this step completes; 0 = never.
  std::size_t stop_after = 0;
  std::function<void(const LossPoint&)> on_step;
};

// Continues `st` from st.step up to cfg.total_steps on a standardized dataset.
template <class S>
void train(TrainState<S>& st, const Dataset& ds, const MaskingConfig& mcfg, const TrainConfig& cfg,
           TrainOptions opts = {}) {
  cfg.validate();
  mcfg.validate();
  DenormalGuard ftz;
  const TokenGrid grid = st.model.config.grid();
  if (ds.records.empty() && cfg.total_steps > st.step) throw ConfigError("training dataset is empty");
  if (cfg.batch_size > ds.records.size() && cfg.total_steps > st.step) {
    throw ConfigError("train.batch_size exceeds the number of training records");
  }
  opts.info.train = cfg;
  opts.info.masking = mcfg;
  const std::size_t every = cfg.checkpoint_interval();
  while (st.step < cfg.total_steps) {
    const std::size_t step = st.step + 1;
    Rng pick = Rng::stream(cfg.seed, "batch", step);
    Rng mask_rng = Rng::stream(cfg.seed, "mask", step);
    auto idx = pick.sample(ds.records.size(), cfg.batch_size);
    TrainingBatch<S> batch = assemble_batch<S>(ds, idx, grid, mcfg, cfg.ablation, mask_rng);
    st.model.zero_grad();
    Tensor<S> loss = batch_loss(st.model, batch);
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) {
      if (opts.out_dir) write_loss_csv(*opts.out_dir / "loss.csv", st.curve);
      throw NumericError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(lv) + ")");
    }
    backward(loss);
    const double lr = lr_at(step, cfg);
    adamw_step(st.model.named(), st.optimizer, lr, cfg);
    st.step = step;
    st.curve.push_back({step, lr, lv});
    if (opts.on_step) opts.on_step(st.curve.back());
    if (opts.out_dir && (step % every == 0 || step == cfg.total_steps)) {
      save_checkpoint(*opts.out_dir / checkpoint_dir_name(step), st, opts.info);
      write_loss_csv(*opts.out_dir / "loss.csv", st.curve);
    }
    if (opts.stop_after && step >= opts.stop_after) break;
  }
  if (opts.out_dir && st.step == cfg.total_steps) {
    st.model.zero_grad();
    save_checkpoint(*opts.out_dir / "final", st, opts.info);
    write_loss_csv(*opts.out_dir / "loss.csv", st.curve);
  }
}

}  // namespace aim
