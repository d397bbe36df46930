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

// Multimodal minutely sensor records with explicit missingness: schema,
// synthetic generation with device-off / sensor-off / point-noise gaps, CSV
// ingestion, per-channel standardization and missingness statistics.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aim/errors.hpp"
#include "aim/rng.hpp"
#include "json.hpp"

namespace aim {

// Maximum per-record missing fraction accepted at ingestion.
inline constexpr double kMaxMissingFraction = 0.80;

struct SensorGroup {
  std::string name;
  std::vector<std::size_t> channels;
};

struct ChannelSchema {
  std::size_t channel_count = 0;
  std::vector<SensorGroup> groups;
  std::vector<std::string> channel_names;

  // Sensor families in canonical order with their feature counts on a
  // 26-feature device.
  static const std::vector<std::pair<std::string, std::size_t>>& sensor_families() {
    static const std::vector<std::pair<std::string, std::size_t>> k = {
        {"ppg", 10}, {"accelerometer", 10}, {"skin_conductance", 3}, {"temperature", 2}, {"altimeter", 1}};
    return k;
  }

  // Partition of `channels` features into the five sensor families, keeping
  // their relative sizes (26 channels reproduces the 10/10/3/2/1 split).
  // Fewer than five channels keeps the first `channels` families.
  static ChannelSchema proportional(std::size_t channels) {
    if (channels < 2) throw ConfigError("a schema needs at least 2 channels");
    const auto& fam = sensor_families();
    const std::size_t g = std::min(channels, fam.size());
    std::vector<std::size_t> sizes(g, 1);
    std::size_t extra = channels - g;
    if (extra > 0) {
      double wsum = 0;
      for (std::size_t i = 0; i < g; ++i) wsum += static_cast<double>(fam[i].second - 1);
      std::vector<double> frac(g);
      std::size_t given = 0;
      for (std::size_t i = 0; i < g; ++i) {
        double share = wsum > 0 ? static_cast<double>(extra) * static_cast<double>(fam[i].second - 1) / wsum : 0.0;
        auto whole = static_cast<std::size_t>(std::floor(share));
        sizes[i] += whole;
        given += whole;
        frac[i] = share - static_cast<double>(whole);
      }
      while (given < extra) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < g; ++i) {
          if (frac[i] > frac[best]) best = i;
        }
        sizes[best] += 1;
        frac[best] = -1.0;
        ++given;
      }
    }
    ChannelSchema s;
    s.channel_count = channels;
    std::size_t c = 0;
    for (std::size_t i = 0; i < g; ++i) {
      SensorGroup grp{fam[i].first, {}};
      for (std::size_t k = 0; k < sizes[i]; ++k, ++c) {
        grp.channels.push_back(c);
        s.channel_names.push_back(fam[i].first + "_" + std::to_string(k));
      }
      s.groups.push_back(std::move(grp));
    }
    return s;
  }

  static ChannelSchema paper_default() { return proportional(26); }

  void validate() const {
    if (channel_count < 1) throw ConfigError("schema has no channels");
    if (channel_names.size() != channel_count) throw ConfigError("schema channel names do not match channel count");
    std::vector<int> owner(channel_count, -1);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (auto c : groups[gi].channels) {
        if (c >= channel_count) throw ConfigError("sensor group '" + groups[gi].name + "' names channel out of range");
        if (owner[c] != -1) throw ConfigError("channel " + std::to_string(c) + " belongs to two sensor groups");
        owner[c] = static_cast<int>(gi);
      }
    }
    for (std::size_t c = 0; c < channel_count; ++c) {
      if (owner[c] == -1) throw ConfigError("channel " + std::to_string(c) + " is in no sensor group");
    }
  }

  std::size_t group_of(std::size_t channel) const {
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (auto c : groups[gi].channels) {
        if (c == channel) return gi;
      }
    }
    throw IndexError("channel " + std::to_string(channel) + " has no sensor group");
  }

  std::optional<std::size_t> find_group(std::string_view name) const {
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (groups[gi].name == name) return gi;
    }
    return std::nullopt;
  }
};

// One day of minutely features. values/observed are row-major [minute][channel].
struct SensorRecord {
  std::string id;
  std::size_t minutes = 0;
  std::size_t channels = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> observed;
  std::map<std::string, double> labels;
  // Missing fraction the generator aimed for; unset for loaded records.
  std::optional<double> target_missing_fraction;

  std::size_t cell(std::size_t t, std::size_t c) const { return t * channels + c; }
  double value(std::size_t t, std::size_t c) const { return values[cell(t, c)]; }
  bool is_observed(std::size_t t, std::size_t c) const { return observed[cell(t, c)] != 0; }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{0}));
  }
  double missing_fraction() const {
    return observed.empty() ? 0.0 : static_cast<double>(missing_count()) / static_cast<double>(observed.size());
  }
};

struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::string> warnings;

  bool fitted() const { return !mean.empty(); }
};

struct Dataset {
  ChannelSchema schema;
  std::size_t minutes = 0;
  std::vector<SensorRecord> records;
  Standardization standardization;
  std::vector<std::string> rejected_ids;

  std::size_t size() const { return records.size(); }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.schema = schema;
    out.minutes = minutes;
    out.standardization = standardization;
    out.records.reserve(idx.size());
    for (auto i : idx) out.records.push_back(records.at(i));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generation.

struct MissingnessProfile {
  double target_mean = 0.49;
  double target_std = 0.15;
  double target_min = 0.02;
  double target_max = 0.80;
  // When set, every record uses this missing fraction instead of sampling.
  std::optional<double> forced_target;

  double weight_device_off = 0.4;
  double weight_sensor_off = 0.4;
  double weight_point_noise = 0.2;

  // Gap lengths in minutes, sampled uniformly in [min, max].
  std::size_t device_off_min = 30;
  std::size_t device_off_max = 240;
  std::size_t sensor_off_min = 20;
  std::size_t sensor_off_max = 180;

  // Defaults scaled to a day of `minutes` samples.
  static MissingnessProfile for_day_length(std::size_t minutes) {
    MissingnessProfile p;
    auto scaled = [&](double frac) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frac * static_cast<double>(minutes)))); };
    p.device_off_min = scaled(30.0 / 1440.0);
    p.device_off_max = scaled(240.0 / 1440.0);
    p.sensor_off_min = scaled(20.0 / 1440.0);
    p.sensor_off_max = scaled(180.0 / 1440.0);
    return p;
  }

  void validate() const {
    if (weight_device_off < 0 || weight_sensor_off < 0 || weight_point_noise < 0) {
      throw ConfigError("missingness mode weights must be nonnegative");
    }
    const double w = weight_device_off + weight_sensor_off + weight_point_noise;
    if (std::abs(w - 1.0) > 1e-9) throw ConfigError("missingness mode weights must sum to 1");
    if (device_off_min < 1 || device_off_min > device_off_max || sensor_off_min < 1 || sensor_off_min > sensor_off_max) {
      throw ConfigError("gap length ranges must satisfy 1 <= min <= max");
    }
    if (target_min < 0 || target_max > kMaxMissingFraction || target_min > target_max) {
      throw ConfigError("missing-fraction clip range must lie in [0, 0.8]");
    }
    if (forced_target && (*forced_target < 0 || *forced_target > kMaxMissingFraction)) {
      throw ConfigError("forced missing fraction must lie in [0, 0.8]");
    }
  }
};

struct GeneratorConfig {
  std::size_t records = 100;
  std::size_t minutes = 1440;
  std::size_t channels = 26;
  // Patch length used downstream; the day must divide into whole patches.
  std::size_t patch = 10;
  std::optional<ChannelSchema> schema;
  MissingnessProfile profile = MissingnessProfile::for_day_length(1440);
  double noise_std = 0.3;
  std::size_t min_bouts = 1;
  std::size_t max_bouts = 4;
  std::size_t activity_classes = 3;
  // Allowed gap between the sampled and realized per-record missing fraction.
  double fraction_tolerance = 0.05;
  std::string id_prefix = "rec";

  ChannelSchema resolved_schema() const { return schema ? *schema : ChannelSchema::proportional(channels); }
};

namespace detail {

// Per-channel response coefficients, fixed for a (seed, schema) pair.
struct ChannelModel {
  double offset, scale, circadian, phase_shift, activity, fast, typed;
  std::size_t group;
  std::size_t index_in_group;
  std::size_t group_size;
};

inline std::vector<ChannelModel> channel_models(const ChannelSchema& schema, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "channel-model");
  std::vector<ChannelModel> out(schema.channel_count);
  for (std::size_t gi = 0; gi < schema.groups.size(); ++gi) {
    const auto& grp = schema.groups[gi];
    const std::string& name = grp.name;
    for (std::size_t k = 0; k < grp.channels.size(); ++k) {
      ChannelModel m{};
      m.group = gi;
      m.index_in_group = k;
      m.group_size = grp.channels.size();
      m.offset = rng.uniform(-50.0, 100.0);
      m.scale = std::exp(rng.uniform(-1.0, 2.0));
      m.phase_shift = rng.uniform(-0.5, 0.5);
      const double j = rng.uniform(0.8, 1.2);
      // Family-specific sensitivities. Only the accelerometer carries the
      // activity type; the altimeter ignores activity altogether.
      if (name == "ppg") {
        m.circadian = 1.0 * j; m.activity = 1.0 * j; m.fast = 0.5 * j; m.typed = 0.0;
      } else if (name == "accelerometer") {
        m.circadian = 0.3 * j; m.activity = 0.3 * j; m.fast = 0.5 * j; m.typed = 6.0 * j;
      } else if (name == "skin_conductance") {
        m.circadian = 0.6 * j; m.activity = 0.6 * j; m.fast = 0.3 * j; m.typed = 0.0;
      } else if (name == "temperature") {
        m.circadian = 1.0 * j; m.activity = 0.3 * j; m.fast = 0.2 * j; m.typed = 0.0;
      } else {
        m.circadian = 0.8 * j; m.activity = 0.0; m.fast = 0.0; m.typed = 0.0;
      }
      out[grp.channels[k]] = m;
    }
  }
  return out;
}

struct Bout {
  std::size_t type;
  double onset, duration, intensity;
};

// Smooth on/off envelope of a bout at minute t (5% ramps at each edge).
inline double bout_envelope(const Bout& b, double t) {
  const double ramp = std::max(1.0, 0.05 * b.duration);
  const double rise = std::clamp((t - b.onset) / ramp, 0.0, 1.0);
  const double fall = std::clamp((b.onset + b.duration - t) / ramp, 0.0, 1.0);
  return std::min(rise, fall);
}

struct MissingnessState {
  std::size_t minutes, channels;
  std::vector<std::uint8_t>& observed;
  std::size_t missing = 0;

  std::size_t count_new(std::size_t t0, std::size_t len, const std::vector<std::size_t>& chans) const {
    std::size_t n = 0;
    for (std::size_t t = t0; t < t0 + len; ++t)
      for (auto c : chans) n += observed[t * channels + c] ? 1 : 0;
    return n;
  }
  bool any_missing(std::size_t t0, std::size_t len, const std::vector<std::size_t>& chans) const {
    const std::size_t lo = t0 == 0 ? 0 : t0 - 1;
    const std::size_t hi = std::min(minutes, t0 + len + 1);
    for (std::size_t t = lo; t < hi; ++t)
      for (auto c : chans)
        if (!observed[t * channels + c]) return true;
    return false;
  }
  void mark(std::size_t t0, std::size_t len, const std::vector<std::size_t>& chans) {
    for (std::size_t t = t0; t < t0 + len; ++t)
      for (auto c : chans) {
        auto& o = observed[t * channels + c];
        if (o) {
          o = 0;
          ++missing;
        }
      }
  }
};

// Injects device-off, sensor-off and point-noise gaps until the record's
// missing count is within tolerance of `target_cells`.
inline void inject_missingness(std::vector<std::uint8_t>& observed, std::size_t minutes, const ChannelSchema& schema,
                               const MissingnessProfile& prof, double target_fraction, double tolerance, Rng& rng) {
  const std::size_t channels = schema.channel_count;
  const std::size_t cells = minutes * channels;
  const auto target_cells = static_cast<std::size_t>(std::llround(target_fraction * static_cast<double>(cells)));
  const double cap_fraction = std::min(target_fraction + tolerance, kMaxMissingFraction);
  const auto cap_cells = static_cast<std::size_t>(std::floor(cap_fraction * static_cast<double>(cells) + 1e-9));
  MissingnessState st{minutes, channels, observed};
  if (target_cells == 0) return;

  std::vector<std::size_t> all(channels);
  std::iota(all.begin(), all.end(), std::size_t{0});

  const double wsum_struct = prof.weight_device_off + prof.weight_sensor_off;
  const bool point_on = prof.weight_point_noise > 0;
  // Structured modes fill their share; without point noise they fill everything.
  const double struct_share = point_on ? wsum_struct : 1.0;
  double share_dev = 0, share_sen = 0;
  if (wsum_struct > 0) {
    share_dev = struct_share * prof.weight_device_off / wsum_struct;
    share_sen = struct_share * prof.weight_sensor_off / wsum_struct;
  }
  const double goal_dev = share_dev * static_cast<double>(target_cells);
  const double goal_sen = share_sen * static_cast<double>(target_cells);
  double done_dev = 0, done_sen = 0;
  bool dev_open = prof.weight_device_off > 0, sen_open = prof.weight_sensor_off > 0;

  for (int iter = 0; iter < 100000 && (dev_open || sen_open) && st.missing < target_cells; ++iter) {
    const double deficit_dev = dev_open ? goal_dev - done_dev : -1e300;
    const double deficit_sen = sen_open ? goal_sen - done_sen : -1e300;
    const bool use_dev = deficit_dev >= deficit_sen;
    if ((use_dev ? deficit_dev : deficit_sen) <= 0) break;

    const std::vector<std::size_t>* chans = &all;
    std::size_t lo, hi;
    if (use_dev) {
      lo = prof.device_off_min; hi = prof.device_off_max;
    } else {
      chans = &schema.groups[rng.index(schema.groups.size())].channels;
      lo = prof.sensor_off_min; hi = prof.sensor_off_max;
    }
    hi = std::min(hi, minutes);
    if (lo > hi) {
      (use_dev ? dev_open : sen_open) = false;
      continue;
    }
    auto len = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    std::size_t start = 0;
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(minutes - len)));
      placed = !st.any_missing(start, len, *chans);
    }
    std::size_t added = st.count_new(start, len, *chans);
    if (added == 0) continue;
    if (st.missing + added > cap_cells) {
      // Shorten the window to land on the target if it would overshoot.
      const std::size_t need = target_cells > st.missing ? target_cells - st.missing : 0;
      std::size_t shorter = std::max<std::size_t>(1, (need + chans->size() - 1) / chans->size());
      while (shorter > lo && st.missing + st.count_new(start, shorter, *chans) > cap_cells) --shorter;
      if (shorter < lo || st.missing + st.count_new(start, shorter, *chans) > cap_cells) {
        (use_dev ? dev_open : sen_open) = false;
        continue;
      }
      len = shorter;
      added = st.count_new(start, len, *chans);
    }
    st.mark(start, len, *chans);
    (use_dev ? done_dev : done_sen) += static_cast<double>(added);
  }

  if (point_on && st.missing < target_cells) {
    std::vector<std::size_t> open;
    open.reserve(cells - st.missing);
    for (std::size_t k = 0; k < cells; ++k)
      if (observed[k]) open.push_back(k);
    for (auto k : rng.sample_from(std::move(open), target_cells - st.missing)) {
      observed[k] = 0;
      ++st.missing;
    }
  }

  const double realized = static_cast<double>(st.missing) / static_cast<double>(cells);
  if (std::abs(realized - target_fraction) > tolerance + 1e-12) {
    throw GenerationError("cannot reach missing fraction " + std::to_string(target_fraction) +
                          " with the configured gap lengths (reached " + std::to_string(realized) + ")");
  }
}

}  // namespace detail

// Label names produced by the generator.
inline constexpr const char* kActivityLabel = "activity";
inline constexpr const char* kAmplitudeLabel = "amplitude";

// Builds records from latent daily structure: a circadian sinusoid with random
// amplitude and phase, a shared fast AR(1) component, and a handful of typed
// activity bouts. "activity" is the dominant bout type (visible only through
// the accelerometer family); "amplitude" is the circadian amplitude.
inline Dataset generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
  const ChannelSchema schema = cfg.resolved_schema();
  schema.validate();
  cfg.profile.validate();
  if (cfg.minutes == 0 || cfg.patch == 0 || cfg.minutes % cfg.patch != 0) {
    throw ConfigError("day length must be a positive multiple of the patch length");
  }
  if (schema.channel_count < 2 || schema.groups.size() < 2) {
    throw ConfigError("generation needs at least 2 channels in at least 2 sensor groups");
  }
  if (cfg.min_bouts < 1 || cfg.min_bouts > cfg.max_bouts || cfg.activity_classes < 2) {
    throw ConfigError("bout counts must satisfy 1 <= min <= max and there must be >= 2 activity classes");
  }
  const std::size_t T = cfg.minutes, S = schema.channel_count;
  const auto models = detail::channel_models(schema, seed);
  const double Td = static_cast<double>(T);
  const double two_pi = 2.0 * std::numbers::pi;

  Dataset ds;
  ds.schema = schema;
  ds.minutes = T;
  ds.records.reserve(cfg.records);
  for (std::size_t r = 0; r < cfg.records; ++r) {
    Rng rng = Rng::stream(seed, "record", r);
    SensorRecord rec;
    std::ostringstream id;
    id << cfg.id_prefix << '_' << r;
    rec.id = id.str();
    rec.minutes = T;
    rec.channels = S;
    rec.values.assign(T * S, 0.0);
    rec.observed.assign(T * S, 1);

    const double amplitude = rng.uniform(0.5, 2.0);
    const double phase = rng.uniform(0.0, two_pi);
    const auto n_bouts = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_bouts), static_cast<std::int64_t>(cfg.max_bouts)));
    std::vector<detail::Bout> bouts;
    std::vector<double> load(cfg.activity_classes, 0.0);
    for (std::size_t b = 0; b < n_bouts; ++b) {
      detail::Bout bt{};
      bt.type = rng.index(cfg.activity_classes);
      bt.duration = rng.uniform(Td / 8.0, Td / 3.0);
      bt.onset = rng.uniform(0.0, Td - bt.duration);
      bt.intensity = rng.uniform(0.5, 1.5);
      load[bt.type] += bt.intensity * bt.duration;
      bouts.push_back(bt);
    }
    const auto dominant = static_cast<std::size_t>(std::distance(load.begin(), std::max_element(load.begin(), load.end())));

    // Fast shared component and an independent altimeter drift, AR(1).
    std::vector<double> fast(T), drift(T);
    double f = rng.normal(), d = rng.normal();
    const double rho = std::exp(-1.0 / std::max(1.0, Td / 144.0));
    const double innov = std::sqrt(1.0 - rho * rho);
    for (std::size_t t = 0; t < T; ++t) {
      f = rho * f + innov * rng.normal();
      d = rho * d + innov * rng.normal();
      fast[t] = f;
      drift[t] = d;
    }

    std::vector<double> activity(T, 0.0);
    std::vector<double> typed(T * cfg.activity_classes, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double tt = static_cast<double>(t) + 0.5;
      for (const auto& b : bouts) {
        const double e = b.intensity * detail::bout_envelope(b, tt);
        activity[t] += e;
        typed[t * cfg.activity_classes + b.type] += e;
      }
    }

    for (std::size_t c = 0; c < S; ++c) {
      const auto& m = models[c];
      const double theta = std::numbers::pi * static_cast<double>(m.index_in_group) / static_cast<double>(m.group_size);
      const bool alt = m.activity == 0.0 && m.fast == 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        double v = amplitude * m.circadian * std::sin(two_pi * static_cast<double>(t) / Td + phase + m.phase_shift);
        v += m.activity * activity[t] + m.fast * fast[t];
        if (m.typed != 0.0) {
          for (std::size_t k = 0; k < cfg.activity_classes; ++k) {
            const double sig = std::cos(two_pi * static_cast<double>(k) / static_cast<double>(cfg.activity_classes) + theta);
            v += m.typed * sig * typed[t * cfg.activity_classes + k];
          }
        }
        if (alt) v += 0.5 * drift[t];
        v += cfg.noise_std * rng.normal();
        rec.values[t * S + c] = m.offset + m.scale * v;
      }
    }
    rec.labels[kActivityLabel] = static_cast<double>(dominant);
    rec.labels[kAmplitudeLabel] = amplitude;

    const MissingnessProfile& p = cfg.profile;
    const double target = p.forced_target ? *p.forced_target
                                          : rng.truncated_normal(p.target_mean, p.target_std, p.target_min, p.target_max);
    rec.target_missing_fraction = target;
    detail::inject_missingness(rec.observed, T, schema, p, target, cfg.fraction_tolerance, rng);
    for (std::size_t k = 0; k < T * S; ++k) {
      if (!rec.observed[k]) rec.values[k] = 0.0;
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion: header record_id,minute,ch_0..ch_{S-1}[,label_<task>...];
// one row per (record, minute); an empty cell is a missing value.

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("not a finite number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

// Reads a dataset. When `expected_channels` is given the header must match it.
// Records above the 80% missing bound are dropped and listed in rejected_ids.
inline Dataset load_csv(const std::string& path, std::optional<std::size_t> expected_channels = std::nullopt,
                        std::optional<ChannelSchema> schema = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'", 1);
  ++lineno;
  auto header = detail::split_csv_line(detail::trim(line));
  if (header.size() < 3 || detail::trim(header[0]) != "record_id" || detail::trim(header[1]) != "minute") {
    throw ParseError("header must start with record_id,minute,ch_0", lineno);
  }
  std::size_t S = 0;
  std::vector<std::string> label_names;
  for (std::size_t i = 2; i < header.size(); ++i) {
    auto h = detail::trim(header[i]);
    if (h.rfind("label_", 0) == 0) {
      label_names.emplace_back(h.substr(6));
    } else if (!label_names.empty()) {
      throw ParseError("channel column after label columns: '" + std::string(h) + "'", lineno);
    } else if (h == "ch_" + std::to_string(S)) {
      ++S;
    } else {
      throw ParseError("unexpected column '" + std::string(h) + "'", lineno);
    }
  }
  if (S == 0) throw ParseError("no channel columns", lineno);
  if (expected_channels && *expected_channels != S) {
    throw ParseError("file has " + std::to_string(S) + " channels but the schema expects " +
                         std::to_string(*expected_channels),
                     lineno);
  }
  const std::size_t fields = 2 + S + label_names.size();

  struct Partial {
    std::string id;
    std::map<std::size_t, std::pair<std::vector<double>, std::vector<std::uint8_t>>> rows;
    std::map<std::string, double> labels;
    std::size_t first_line;
  };
  std::vector<Partial> parts;
  std::unordered_map<std::string, std::size_t> by_id;
  while (std::getline(in, line)) {
    ++lineno;
    auto tl = detail::trim(line);
    if (tl.empty()) continue;
    auto cells = detail::split_csv_line(tl);
    if (cells.size() != fields) {
      throw ParseError("expected " + std::to_string(fields) + " fields, found " + std::to_string(cells.size()), lineno);
    }
    std::string id(detail::trim(cells[0]));
    if (id.empty()) throw ParseError("empty record_id", lineno);
    std::optional<double> minute_v;
    try {
      minute_v = detail::parse_double(cells[1]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
    if (!minute_v || *minute_v < 0 || std::floor(*minute_v) != *minute_v) {
      throw ParseError("minute must be a nonnegative integer", lineno);
    }
    const auto minute = static_cast<std::size_t>(*minute_v);
    auto [it, fresh] = by_id.emplace(id, parts.size());
    if (fresh) parts.push_back(Partial{id, {}, {}, lineno});
    Partial& p = parts[it->second];
    if (p.rows.count(minute)) throw ParseError("duplicate minute " + std::to_string(minute) + " for record " + id, lineno);
    std::vector<double> vals(S, 0.0);
    std::vector<std::uint8_t> obs(S, 0);
    for (std::size_t c = 0; c < S; ++c) {
      try {
        if (auto v = detail::parse_double(cells[2 + c])) {
          vals[c] = *v;
          obs[c] = 1;
        }
      } catch (const ParseError& e) {
        throw ParseError(e.what(), lineno);
      }
    }
    for (std::size_t l = 0; l < label_names.size(); ++l) {
      std::optional<double> v;
      try {
        v = detail::parse_double(cells[2 + S + l]);
      } catch (const ParseError& e) {
        throw ParseError(e.what(), lineno);
      }
      if (!v) continue;
      auto [lit, lfresh] = p.labels.emplace(label_names[l], *v);
      if (!lfresh && lit->second != *v) {
        throw ParseError("label '" + label_names[l] + "' changes within record " + id, lineno);
      }
    }
    p.rows.emplace(minute, std::make_pair(std::move(vals), std::move(obs)));
  }

  Dataset ds;
  ds.schema = schema ? *schema : ChannelSchema::proportional(std::max<std::size_t>(S, 2));
  if (ds.schema.channel_count != S) throw ParseError("schema channel count does not match file");
  ds.schema.validate();
  for (auto& p : parts) {
    const std::size_t T = p.rows.rbegin()->first + 1;
    if (ds.minutes == 0) ds.minutes = T;
    if (T != ds.minutes || p.rows.size() != T) {
      throw ParseError("record " + p.id + " does not cover minutes 0.." + std::to_string(ds.minutes - 1), p.first_line);
    }
    SensorRecord rec;
    rec.id = p.id;
    rec.minutes = T;
    rec.channels = S;
    rec.values.reserve(T * S);
    rec.observed.reserve(T * S);
    for (auto& [m, row] : p.rows) {
      rec.values.insert(rec.values.end(), row.first.begin(), row.first.end());
      rec.observed.insert(rec.observed.end(), row.second.begin(), row.second.end());
    }
    rec.labels = std::move(p.labels);
    if (rec.missing_fraction() > kMaxMissingFraction) {
      ds.rejected_ids.push_back(rec.id);
      continue;
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  std::vector<std::string> labels;
  for (const auto& r : ds.records)
    for (const auto& [k, v] : r.labels)
      if (std::find(labels.begin(), labels.end(), k) == labels.end()) labels.push_back(k);
  std::sort(labels.begin(), labels.end());
  const std::size_t S = ds.schema.channel_count;
  out << "record_id,minute";
  for (std::size_t c = 0; c < S; ++c) out << ",ch_" << c;
  for (const auto& l : labels) out << ",label_" << l;
  out << '\n';
  for (const auto& r : ds.records) {
    std::string label_tail;
    for (const auto& l : labels) {
      label_tail += ',';
      auto it = r.labels.find(l);
      if (it != r.labels.end()) label_tail += detail::format_double(it->second);
    }
    for (std::size_t t = 0; t < r.minutes; ++t) {
      out << r.id << ',' << t;
      for (std::size_t c = 0; c < S; ++c) {
        out << ',';
        if (r.is_observed(t, c)) out << detail::format_double(r.value(t, c));
      }
      out << label_tail << '\n';
    }
  }
  if (!out) throw Error("failed while writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Standardization.

// Per-channel mean/std over observed cells of the given records.
inline Standardization fit_standardization(const Dataset& ds, const std::vector<std::size_t>& train) {
  if (train.empty()) throw ConfigError("standardization needs a nonempty training split");
  const std::size_t S = ds.schema.channel_count;
  Standardization st;
  st.mean.assign(S, 0.0);
  st.stddev.assign(S, 1.0);
  std::vector<double> sum(S, 0.0);
  std::vector<std::size_t> cnt(S, 0);
  for (auto i : train) {
    const auto& r = ds.records.at(i);
    for (std::size_t t = 0; t < r.minutes; ++t)
      for (std::size_t c = 0; c < S; ++c)
        if (r.is_observed(t, c)) {
          sum[c] += r.value(t, c);
          ++cnt[c];
        }
  }
  for (std::size_t c = 0; c < S; ++c) st.mean[c] = cnt[c] ? sum[c] / static_cast<double>(cnt[c]) : 0.0;
  std::vector<double> ss(S, 0.0);
  for (auto i : train) {
    const auto& r = ds.records.at(i);
    for (std::size_t t = 0; t < r.minutes; ++t)
      for (std::size_t c = 0; c < S; ++c)
        if (r.is_observed(t, c)) {
          const double d = r.value(t, c) - st.mean[c];
          ss[c] += d * d;
        }
  }
  for (std::size_t c = 0; c < S; ++c) {
    const double sd = cnt[c] ? std::sqrt(ss[c] / static_cast<double>(cnt[c])) : 0.0;
    if (sd > 0.0) {
      st.stddev[c] = sd;
    } else {
      st.stddev[c] = 1.0;
      st.warnings.push_back("channel " + std::to_string(c) + " is constant on the training split; using std=1");
    }
  }
  return st;
}

// Applies stats to every record's observed cells; unobserved cells are untouched.
inline Dataset apply_standardization(const Dataset& ds, const Standardization& st) {
  Dataset out = ds;
  out.standardization = st;
  const std::size_t S = ds.schema.channel_count;
  for (auto& r : out.records) {
    for (std::size_t t = 0; t < r.minutes; ++t)
      for (std::size_t c = 0; c < S; ++c)
        if (r.is_observed(t, c)) r.values[r.cell(t, c)] = (r.values[r.cell(t, c)] - st.mean[c]) / st.stddev[c];
  }
  return out;
}

inline Dataset standardize(const Dataset& ds, const std::vector<std::size_t>& train) {
  Standardization st = fit_standardization(ds, train);
  for (const auto& w : st.warnings) std::clog << "warning: " << w << '\n';
  return apply_standardization(ds, st);
}

// ---------------------------------------------------------------------------
// Missingness statistics.

struct Histogram {
  std::vector<double> edges;  // bins.size() + 1 edges
  std::vector<std::size_t> counts;
};

struct MissingnessReport {
  std::vector<double> per_record_fraction;
  Histogram fraction_histogram;
  double mean_fraction = 0, median_fraction = 0, std_fraction = 0, min_fraction = 0, max_fraction = 0;
  std::vector<double> per_channel_prevalence;
  // Per channel: maximal run length of missing minutes -> number of runs.
  std::vector<std::map<std::size_t, std::size_t>> gap_lengths;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["per_record_fraction"] = {{"bins", fraction_histogram.edges},
                                {"counts", fraction_histogram.counts},
                                {"mean", mean_fraction},
                                {"median", median_fraction},
                                {"std", std_fraction},
                                {"min", min_fraction},
                                {"max", max_fraction},
                                {"records", per_record_fraction.size()}};
    j["per_channel_prevalence"] = per_channel_prevalence;
    nlohmann::json gaps = nlohmann::json::array();
    for (std::size_t c = 0; c < gap_lengths.size(); ++c) {
      std::vector<std::size_t> lens, counts;
      for (const auto& [l, n] : gap_lengths[c]) {
        lens.push_back(l);
        counts.push_back(n);
      }
      gaps.push_back({{"channel", c}, {"lengths", lens}, {"counts", counts}});
    }
    j["gap_length_histogram"] = gaps;
    return j;
  }
};

inline MissingnessReport missingness_stats(const Dataset& ds, std::size_t bins = 20) {
  MissingnessReport rep;
  const std::size_t S = ds.schema.channel_count;
  rep.per_channel_prevalence.assign(S, 0.0);
  rep.gap_lengths.assign(S, {});
  std::vector<std::size_t> chan_missing(S, 0);
  std::size_t chan_total = 0;
  for (const auto& r : ds.records) {
    rep.per_record_fraction.push_back(r.missing_fraction());
    chan_total += r.minutes;
    for (std::size_t c = 0; c < S; ++c) {
      std::size_t run = 0;
      for (std::size_t t = 0; t < r.minutes; ++t) {
        if (!r.is_observed(t, c)) {
          ++run;
          ++chan_missing[c];
        } else if (run) {
          ++rep.gap_lengths[c][run];
          run = 0;
        }
      }
      if (run) ++rep.gap_lengths[c][run];
    }
  }
  for (std::size_t c = 0; c < S; ++c) {
    rep.per_channel_prevalence[c] = chan_total ? static_cast<double>(chan_missing[c]) / static_cast<double>(chan_total) : 0.0;
  }
  rep.fraction_histogram.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) rep.fraction_histogram.edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  rep.fraction_histogram.counts.assign(bins, 0);
  const auto& f = rep.per_record_fraction;
  for (double v : f) {
    auto b = std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)));
    ++rep.fraction_histogram.counts[b];
  }
  if (!f.empty()) {
    const double n = static_cast<double>(f.size());
    rep.mean_fraction = std::accumulate(f.begin(), f.end(), 0.0) / n;
    double ss = 0;
    for (double v : f) ss += (v - rep.mean_fraction) * (v - rep.mean_fraction);
    rep.std_fraction = std::sqrt(ss / n);
    std::vector<double> sorted = f;
    std::sort(sorted.begin(), sorted.end());
    rep.median_fraction = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                            : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    rep.min_fraction = sorted.front();
    rep.max_fraction = sorted.back();
  }
  return rep;
}

}  // namespace aim
