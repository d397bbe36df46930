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

// Classical per-channel gap fillers. Grids are row-major [minute][channel];
// observed cells are returned unchanged and a channel with no observed cell
// is filled with 0 (the standardized mean).

#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "aim/errors.hpp"
#include "aim/sensor_data.hpp"

namespace aim {

enum class Imputer { kLinear, kNearest, kMean };

inline std::string_view imputer_name(Imputer k) {
  switch (k) {
    case Imputer::kLinear: return "linear";
    case Imputer::kNearest: return "nearest";
    case Imputer::kMean: return "mean";
  }
  return "unknown";
}

namespace detail {
inline void check_grid(const std::vector<double>& v, const std::vector<std::uint8_t>& o, std::size_t T, std::size_t S) {
  if (v.size() != T * S || o.size() != T * S) throw DimensionError("imputer grid does not match T x S");
}

inline std::vector<std::size_t> observed_minutes(const std::vector<std::uint8_t>& o, std::size_t T, std::size_t S,
                                                 std::size_t c) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < T; ++t)
    if (o[t * S + c]) out.push_back(t);
  return out;
}
}  // namespace detail

// Linear interpolation across interior gaps, back-fill before the first
// observation and forward-fill after the last.
inline std::vector<double> impute_linear(const std::vector<double>& values, const std::vector<std::uint8_t>& observed,
                                         std::size_t T, std::size_t S) {
  detail::check_grid(values, observed, T, S);
  std::vector<double> out = values;
  for (std::size_t c = 0; c < S; ++c) {
    auto obs = detail::observed_minutes(observed, T, S, c);
    if (obs.empty()) {
      for (std::size_t t = 0; t < T; ++t) out[t * S + c] = 0.0;
      continue;
    }
    for (std::size_t t = 0; t < obs.front(); ++t) out[t * S + c] = values[obs.front() * S + c];
    for (std::size_t t = obs.back() + 1; t < T; ++t) out[t * S + c] = values[obs.back() * S + c];
    for (std::size_t i = 0; i + 1 < obs.size(); ++i) {
      const std::size_t a = obs[i], b = obs[i + 1];
      const double va = values[a * S + c], vb = values[b * S + c];
      for (std::size_t t = a + 1; t < b; ++t) {
        const double w = static_cast<double>(t - a) / static_cast<double>(b - a);
        out[t * S + c] = va + w * (vb - va);
      }
    }
  }
  return out;
}

// Temporally nearest observation in the same channel; ties go to the earlier one.
inline std::vector<double> impute_nn(const std::vector<double>& values, const std::vector<std::uint8_t>& observed,
                                     std::size_t T, std::size_t S) {
  detail::check_grid(values, observed, T, S);
  std::vector<double> out = values;
  for (std::size_t c = 0; c < S; ++c) {
    auto obs = detail::observed_minutes(observed, T, S, c);
    if (obs.empty()) {
      for (std::size_t t = 0; t < T; ++t) out[t * S + c] = 0.0;
      continue;
    }
    std::size_t j = 0;  // obs[j] is the first observation at or after t
    for (std::size_t t = 0; t < T; ++t) {
      while (j < obs.size() && obs[j] < t) ++j;
      if (observed[t * S + c]) continue;
      std::size_t src;
      if (j == 0) {
        src = obs[0];
      } else if (j == obs.size()) {
        src = obs.back();
      } else {
        src = (t - obs[j - 1] <= obs[j] - t) ? obs[j - 1] : obs[j];
      }
      out[t * S + c] = values[src * S + c];
    }
  }
  return out;
}

// Within-record per-channel mean of observed values.
inline std::vector<double> impute_mean(const std::vector<double>& values, const std::vector<std::uint8_t>& observed,
                                       std::size_t T, std::size_t S) {
  detail::check_grid(values, observed, T, S);
  std::vector<double> out = values;
  for (std::size_t c = 0; c < S; ++c) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < T; ++t)
      if (observed[t * S + c]) {
        sum += values[t * S + c];
        ++n;
      }
    const double fill = n ? sum / static_cast<double>(n) : 0.0;
    for (std::size_t t = 0; t < T; ++t)
      if (!observed[t * S + c]) out[t * S + c] = fill;
  }
  return out;
}

inline std::vector<double> impute(Imputer kind, const std::vector<double>& values,
                                  const std::vector<std::uint8_t>& observed, std::size_t T, std::size_t S) {
  switch (kind) {
    case Imputer::kLinear: return impute_linear(values, observed, T, S);
    case Imputer::kNearest: return impute_nn(values, observed, T, S);
    case Imputer::kMean: return impute_mean(values, observed, T, S);
  }
  throw ContractViolation("unknown imputer");
}

inline std::vector<double> impute(Imputer kind, const SensorRecord& r) {
  return impute(kind, r.values, r.observed, r.minutes, r.channels);
}

}  // namespace aim
