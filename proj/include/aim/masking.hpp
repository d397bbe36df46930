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

// Token-level mask algebra. A record of T minutes and S channels is cut into
// N = (T / P) * S tokens; every mask below is an N-length 0/1 vector where 1
// means "masked".

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aim/errors.hpp"
#include "aim/rng.hpp"
#include "aim/sensor_data.hpp"
#include "aim/tensor.hpp"
#include "json.hpp"

namespace aim {

using TokenMask = std::vector<std::uint8_t>;

struct TokenGrid {
  std::size_t minutes = 1440;
  std::size_t channels = 26;
  std::size_t patch = 10;

  static TokenGrid make(std::size_t minutes, std::size_t channels, std::size_t patch) {
    if (patch == 0 || minutes == 0 || channels == 0) throw ConfigError("grid extents must be positive");
    if (minutes % patch != 0) {
      throw ConfigError("day length " + std::to_string(minutes) + " is not a multiple of patch length " +
                        std::to_string(patch));
    }
    return TokenGrid{minutes, channels, patch};
  }

  std::size_t slots() const { return minutes / patch; }
  std::size_t tokens() const { return slots() * channels; }
  // Channel-major: all slots of channel 0, then channel 1, ...
  std::size_t index(std::size_t channel, std::size_t slot) const { return channel * slots() + slot; }
  std::size_t channel_of(std::size_t token) const { return token / slots(); }
  std::size_t slot_of(std::size_t token) const { return token % slots(); }
};

enum class Strategy { kRandomImputation, kTemporalSlice, kSignalSlice, kEvalTask, kTargeted };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kRandomImputation: return "random_imputation";
    case Strategy::kTemporalSlice: return "temporal_slice";
    case Strategy::kSignalSlice: return "signal_slice";
    case Strategy::kEvalTask: return "eval_task";
    case Strategy::kTargeted: return "targeted";
  }
  return "unknown";
}

inline Strategy parse_strategy(std::string_view s) {
  for (auto k : {Strategy::kRandomImputation, Strategy::kTemporalSlice, Strategy::kSignalSlice, Strategy::kEvalTask,
                 Strategy::kTargeted}) {
    if (strategy_name(k) == s) return k;
  }
  throw ConfigError("unknown masking strategy '" + std::string(s) + "'");
}

struct MaskingConfig {
  struct Entry {
    Strategy strategy;
    double ratio;
  };
  std::vector<Entry> mix = {{Strategy::kRandomImputation, 0.80},
                            {Strategy::kTemporalSlice, 0.50},
                            {Strategy::kSignalSlice, 0.50}};
  double drop_fraction = 0.5;
  // A token is inherited-masked when at least this fraction of its pixels is missing.
  double tau = 1.0;

  std::size_t drop_count(std::size_t tokens) const {
    return static_cast<std::size_t>(std::llround(drop_fraction * static_cast<double>(tokens)));
  }

  void validate() const {
    if (!(drop_fraction > 0.0 && drop_fraction < 1.0)) throw ConfigError("masking.drop_fraction must lie in (0, 1)");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("masking.tau must lie in (0, 1]");
    if (mix.empty()) throw ConfigError("masking strategy mix is empty");
    for (const auto& e : mix) {
      if (e.strategy != Strategy::kRandomImputation && e.strategy != Strategy::kTemporalSlice &&
          e.strategy != Strategy::kSignalSlice) {
        throw ConfigError("strategy '" + std::string(strategy_name(e.strategy)) + "' cannot be used for pre-training");
      }
      if (!(e.ratio > 0.0 && e.ratio <= 1.0)) throw ConfigError("masking ratios must lie in (0, 1]");
      if (e.ratio < drop_fraction) {
        throw ConfigError("masking ratio " + std::to_string(e.ratio) + " for " + std::string(strategy_name(e.strategy)) +
                          " is below drop_fraction " + std::to_string(drop_fraction) +
                          "; raise the ratio or lower drop_fraction");
      }
    }
  }
};

struct MaskPlan {
  TokenMask inherited;
  TokenMask artificial;
  TokenMask union_mask;
  RowIndex drop_idx;         // sorted
  RowIndex attn_masked_idx;  // union \ drop, sorted
  RowIndex keep_idx;         // complement of drop_idx, sorted
  Strategy strategy = Strategy::kRandomImputation;

  std::size_t tokens() const { return union_mask.size(); }

  // Per kept position: 1 when the kept token is a mask placeholder.
  TokenMask kept_placeholders() const {
    TokenMask out(keep_idx.size());
    for (std::size_t i = 0; i < keep_idx.size(); ++i) out[i] = union_mask[keep_idx[i]];
    return out;
  }

  nlohmann::json to_json() const {
    auto positions = [](const TokenMask& m) {
      std::vector<std::size_t> out;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) out.push_back(i);
      return out;
    };
    return {{"tokens", tokens()},
            {"strategy", strategy_name(strategy)},
            {"inherited", positions(inherited)},
            {"artificial", positions(artificial)},
            {"union", positions(union_mask)},
            {"drop_idx", drop_idx},
            {"attn_masked_idx", attn_masked_idx},
            {"keep_idx", keep_idx}};
  }
};

// ---------------------------------------------------------------------------

// observed: row-major [minute][channel] bitmap of a T x S record.
inline TokenMask derive_inherited_mask(const std::vector<std::uint8_t>& observed, const TokenGrid& grid, double tau) {
  if (observed.size() != grid.minutes * grid.channels) {
    throw ContractViolation("observed bitmap has " + std::to_string(observed.size()) + " cells, grid expects " +
                            std::to_string(grid.minutes * grid.channels));
  }
  TokenMask out(grid.tokens(), 0);
  const auto P = static_cast<double>(grid.patch);
  for (std::size_t c = 0; c < grid.channels; ++c) {
    for (std::size_t k = 0; k < grid.slots(); ++k) {
      std::size_t miss = 0;
      for (std::size_t p = 0; p < grid.patch; ++p) miss += observed[(k * grid.patch + p) * grid.channels + c] ? 0 : 1;
      // Compare counts rather than fractions so tau = 3/10 is exact.
      if (static_cast<double>(miss) >= tau * P - 1e-9) out[grid.index(c, k)] = 1;
    }
  }
  return out;
}

inline TokenMask derive_inherited_mask(const SensorRecord& record, const TokenGrid& grid, double tau) {
  if (record.minutes != grid.minutes || record.channels != grid.channels) {
    throw ContractViolation("record shape does not match the token grid");
  }
  return derive_inherited_mask(record.observed, grid, tau);
}

inline std::size_t ceil_count(double ratio, std::size_t n) {
  // Guard against 0.8 * 3744 landing a hair above an integer.
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

inline TokenMask sample_artificial_mask(Strategy strategy, double ratio, const TokenMask& inherited,
                                        const TokenGrid& grid, Rng& rng) {
  const std::size_t N = grid.tokens();
  if (inherited.size() != N) throw ContractViolation("inherited mask length does not match grid");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("masking ratio must lie in (0, 1]");
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < N; ++i)
    if (!inherited[i]) open.push_back(i);
  if (open.empty()) throw MaskingError("record has no observed tokens");

  TokenMask out(N, 0);
  switch (strategy) {
    case Strategy::kRandomImputation:
      for (auto i : rng.sample_from(open, ceil_count(ratio, open.size()))) out[i] = 1;
      break;
    case Strategy::kTemporalSlice:
      for (auto k : rng.sample(grid.slots(), ceil_count(ratio, grid.slots())))
        for (std::size_t c = 0; c < grid.channels; ++c) out[grid.index(c, k)] = 1;
      break;
    case Strategy::kSignalSlice:
      for (auto c : rng.sample(grid.channels, ceil_count(ratio, grid.channels)))
        for (std::size_t k = 0; k < grid.slots(); ++k) out[grid.index(c, k)] = 1;
      break;
    default:
      throw ConfigError("strategy '" + std::string(strategy_name(strategy)) + "' is not an artificial strategy");
  }
  for (std::size_t i = 0; i < N; ++i)
    if (inherited[i]) out[i] = 0;
  return out;
}

// Picks one entry of the mix with equal probability.
inline const MaskingConfig::Entry& draw_strategy(const MaskingConfig& cfg, Rng& rng) {
  return cfg.mix[rng.index(cfg.mix.size())];
}

inline MaskPlan build_mask_plan(const TokenMask& inherited, const TokenMask& artificial, std::size_t drop_count,
                                Rng& rng, Strategy strategy = Strategy::kRandomImputation) {
  const std::size_t N = inherited.size();
  if (artificial.size() != N) throw ContractViolation("inherited and artificial masks differ in length");
  MaskPlan plan;
  plan.strategy = strategy;
  plan.inherited = inherited;
  plan.artificial = artificial;
  plan.union_mask.assign(N, 0);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < N; ++i) {
    if (inherited[i] && artificial[i]) throw ContractViolation("artificial mask overlaps inherited mask at token " + std::to_string(i));
    plan.union_mask[i] = (inherited[i] || artificial[i]) ? 1 : 0;
    if (plan.union_mask[i]) members.push_back(i);
  }
  if (members.size() < drop_count) {
    throw ConfigError("mask union has " + std::to_string(members.size()) + " tokens but " + std::to_string(drop_count) +
                      " must be dropped; raise the masking ratios or lower drop_fraction");
  }
  if (drop_count == N) throw ConfigError("cannot drop every token");
  plan.drop_idx = rng.sample_from(members, drop_count);
  std::sort(plan.drop_idx.begin(), plan.drop_idx.end());
  TokenMask dropped(N, 0);
  for (auto i : plan.drop_idx) dropped[i] = 1;
  for (std::size_t i = 0; i < N; ++i) {
    if (dropped[i]) continue;
    plan.keep_idx.push_back(i);
    if (plan.union_mask[i]) plan.attn_masked_idx.push_back(i);
  }
  return plan;
}

// Samples the artificial mask from the configured mix and builds the plan.
inline MaskPlan sample_training_plan(const TokenMask& inherited, const TokenGrid& grid, const MaskingConfig& cfg,
                                     Rng& rng) {
  const auto& e = draw_strategy(cfg, rng);
  TokenMask art = sample_artificial_mask(e.strategy, e.ratio, inherited, grid, rng);
  return build_mask_plan(inherited, art, cfg.drop_count(grid.tokens()), rng, e.strategy);
}

// Attention-only plan (nothing dropped), used at evaluation time.
inline MaskPlan attention_only_plan(const TokenMask& inherited, const TokenMask& artificial,
                                    Strategy strategy = Strategy::kEvalTask) {
  Rng unused(0);
  return build_mask_plan(inherited, artificial, 0, unused, strategy);
}

// ---------------------------------------------------------------------------
// Evaluation and targeted masks.

enum class EvalKind { kRandomImp, kTemporalInterp, kTemporalExtrap, kSignalImp, kTargetedGroup, kTargetedWindow };

inline std::string_view eval_kind_name(EvalKind k) {
  switch (k) {
    case EvalKind::kRandomImp: return "random_imp";
    case EvalKind::kTemporalInterp: return "temporal_interp";
    case EvalKind::kTemporalExtrap: return "temporal_extrap";
    case EvalKind::kSignalImp: return "signal_imp";
    case EvalKind::kTargetedGroup: return "targeted_group";
    case EvalKind::kTargetedWindow: return "targeted_window";
  }
  return "unknown";
}

inline EvalKind parse_eval_kind(std::string_view s) {
  for (auto k : {EvalKind::kRandomImp, EvalKind::kTemporalInterp, EvalKind::kTemporalExtrap, EvalKind::kSignalImp,
                 EvalKind::kTargetedGroup, EvalKind::kTargetedWindow}) {
    if (eval_kind_name(k) == s) return k;
  }
  throw ConfigError("unknown evaluation task '" + std::string(s) + "'");
}

// Wall-clock window on a 1440-minute clock; end < start wraps past midnight.
struct TimeWindow {
  std::string name;
  double start_minute;
  double end_minute;

  bool contains(double clock_minute) const {
    if (start_minute <= end_minute) return clock_minute >= start_minute && clock_minute < end_minute;
    return clock_minute >= start_minute || clock_minute < end_minute;
  }
};

inline const std::vector<TimeWindow>& standard_windows() {
  static const std::vector<TimeWindow> k = {
      {"morning", 480, 720}, {"afternoon", 720, 960}, {"evening", 960, 1200}, {"night", 1200, 480}};
  return k;
}

inline const TimeWindow& find_window(std::string_view name) {
  for (const auto& w : standard_windows())
    if (w.name == name) return w;
  throw ConfigError("unknown time window '" + std::string(name) + "'");
}

// Slots whose midpoint, mapped proportionally onto a 24h clock, lies in `w`.
inline std::vector<std::size_t> window_slots(const TimeWindow& w, const TokenGrid& grid) {
  std::vector<std::size_t> out;
  const double scale = 1440.0 / static_cast<double>(grid.minutes);
  for (std::size_t k = 0; k < grid.slots(); ++k) {
    const double mid = (static_cast<double>(k * grid.patch) + 0.5 * static_cast<double>(grid.patch)) * scale;
    if (w.contains(mid)) out.push_back(k);
  }
  return out;
}

struct EvalTask {
  EvalKind kind = EvalKind::kRandomImp;
  // Fraction for random_imp, minutes for temporal tasks, channel count for signal_imp.
  double param = 0.5;
  // Sensor group name or time-window name for targeted tasks.
  std::string target;
  // Allows parameters outside the standard grids.
  bool extended = false;

  std::string label() const {
    if (kind == EvalKind::kTargetedGroup || kind == EvalKind::kTargetedWindow) {
      return std::string(eval_kind_name(kind)) + ":" + target;
    }
    std::ostringstream os;
    os << eval_kind_name(kind) << ':' << param;
    return os.str();
  }

  void validate(const TokenGrid& grid) const {
    auto in = [&](std::initializer_list<double> grid_vals) {
      for (double g : grid_vals)
        if (std::abs(g - param) < 1e-9) return true;
      return false;
    };
    switch (kind) {
      case EvalKind::kRandomImp:
        if (!(param > 0 && param <= 1)) throw ConfigError("random_imp fraction must lie in (0, 1]");
        if (!extended && !in({0.3, 0.5, 0.8})) throw ConfigError("random_imp fraction outside {0.3, 0.5, 0.8}");
        break;
      case EvalKind::kTemporalInterp:
      case EvalKind::kTemporalExtrap:
        if (!(param > 0)) throw ConfigError("temporal window must be positive");
        if (!extended && !in({10, 30, 60})) throw ConfigError("temporal window outside {10, 30, 60} minutes");
        if (static_cast<std::size_t>(std::ceil(param / static_cast<double>(grid.patch) - 1e-9)) > grid.slots()) {
          throw ConfigError("temporal window of " + std::to_string(param) + " minutes is longer than the day");
        }
        break;
      case EvalKind::kSignalImp:
        if (!(param >= 1) || std::floor(param) != param) throw ConfigError("signal_imp needs a positive channel count");
        if (!extended && !in({2, 6, 12})) throw ConfigError("signal_imp count outside {2, 6, 12}");
        if (static_cast<std::size_t>(param) > grid.channels) {
          throw ConfigError("signal_imp of " + std::to_string(static_cast<int>(param)) + " channels exceeds " +
                            std::to_string(grid.channels));
        }
        break;
      case EvalKind::kTargetedGroup:
      case EvalKind::kTargetedWindow:
        if (target.empty()) throw ConfigError("targeted task needs a target name");
        break;
    }
  }
};

// Artificial mask for an evaluation task; inherited tokens are never included.
inline TokenMask build_eval_mask(const EvalTask& task, const TokenMask& inherited, const TokenGrid& grid,
                                 const ChannelSchema& schema, Rng& rng) {
  task.validate(grid);
  const std::size_t N = grid.tokens(), slots = grid.slots();
  if (inherited.size() != N) throw ContractViolation("inherited mask length does not match grid");
  TokenMask out(N, 0);
  auto mask_slots = [&](std::size_t first, std::size_t count) {
    for (std::size_t k = first; k < first + count; ++k)
      for (std::size_t c = 0; c < grid.channels; ++c) out[grid.index(c, k)] = 1;
  };
  switch (task.kind) {
    case EvalKind::kRandomImp: {
      std::vector<std::size_t> open;
      for (std::size_t i = 0; i < N; ++i)
        if (!inherited[i]) open.push_back(i);
      for (auto i : rng.sample_from(open, ceil_count(task.param, open.size()))) out[i] = 1;
      break;
    }
    case EvalKind::kTemporalInterp: {
      const auto len = static_cast<std::size_t>(std::ceil(task.param / static_cast<double>(grid.patch) - 1e-9));
      // Keep at least one slot on each side so the block is a true interpolation gap.
      std::size_t lo = 1, hi = slots >= len + 1 ? slots - len - 1 : 0;
      if (hi < lo) {
        lo = 0;
        hi = slots - len;
      }
      mask_slots(static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi))),
                 len);
      break;
    }
    case EvalKind::kTemporalExtrap: {
      const auto len = static_cast<std::size_t>(std::ceil(task.param / static_cast<double>(grid.patch) - 1e-9));
      mask_slots(slots - len, len);
      break;
    }
    case EvalKind::kSignalImp:
      for (auto c : rng.sample(grid.channels, static_cast<std::size_t>(task.param)))
        for (std::size_t k = 0; k < slots; ++k) out[grid.index(c, k)] = 1;
      break;
    case EvalKind::kTargetedGroup: {
      auto g = schema.find_group(task.target);
      if (!g) throw ConfigError("unknown sensor group '" + task.target + "'");
      for (auto c : schema.groups[*g].channels)
        for (std::size_t k = 0; k < slots; ++k) out[grid.index(c, k)] = 1;
      break;
    }
    case EvalKind::kTargetedWindow:
      for (auto k : window_slots(find_window(task.target), grid)) mask_slots(k, 1);
      break;
  }
  for (std::size_t i = 0; i < N; ++i)
    if (inherited[i]) out[i] = 0;
  return out;
}

}  // namespace aim
