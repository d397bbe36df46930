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

#include "aim/sensor_data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace aim {
namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "aim_sensor_data_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& body) { std::ofstream(path, std::ios::binary) << body; }

GeneratorConfig small_config(std::size_t records = 20) {
  GeneratorConfig g;
  g.records = records;
  g.minutes = 144;
  g.channels = 8;
  g.patch = 6;
  g.profile = MissingnessProfile::for_day_length(144);
  return g;
}

std::vector<std::size_t> group_sizes(const ChannelSchema& s) {
  std::vector<std::size_t> out;
  for (const auto& g : s.groups) out.push_back(g.channels.size());
  return out;
}

TEST(Schema, ProportionalPartition) {
  EXPECT_EQ(group_sizes(ChannelSchema::paper_default()), (std::vector<std::size_t>{10, 10, 3, 2, 1}));
  EXPECT_EQ(group_sizes(ChannelSchema::proportional(8)), (std::vector<std::size_t>{3, 2, 1, 1, 1}));
  EXPECT_EQ(group_sizes(ChannelSchema::proportional(3)), (std::vector<std::size_t>{1, 1, 1}));
  for (std::size_t s = 2; s <= 40; ++s) EXPECT_NO_THROW(ChannelSchema::proportional(s).validate());
  ChannelSchema bad = ChannelSchema::proportional(8);
  bad.groups[0].channels.push_back(4);
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Generator, ForcedZeroMissingIsFullyObserved) {
  auto cfg = small_config();
  cfg.profile.forced_target = 0.0;
  for (const auto& r : generate_synthetic(cfg, 1).records) EXPECT_EQ(r.missing_count(), 0u);
}

TEST(Generator, DeviceOffOnlyMasksWholeMinutes) {
  auto cfg = small_config(50);
  cfg.profile.weight_device_off = 1.0;
  cfg.profile.weight_sensor_off = 0.0;
  cfg.profile.weight_point_noise = 0.0;
  for (const auto& r : generate_synthetic(cfg, 2).records) {
    for (std::size_t t = 0; t < r.minutes; ++t) {
      std::size_t obs = 0;
      for (std::size_t c = 0; c < r.channels; ++c) obs += r.is_observed(t, c);
      EXPECT_TRUE(obs == 0 || obs == r.channels) << r.id << " minute " << t;
    }
  }
}

TEST(Generator, SensorOffGapsStayInsideGroups) {
  auto cfg = small_config(50);
  cfg.profile.weight_device_off = 0.0;
  cfg.profile.weight_sensor_off = 1.0;
  cfg.profile.weight_point_noise = 0.0;
  auto ds = generate_synthetic(cfg, 3);
  for (const auto& r : ds.records) {
    EXPECT_GT(r.missing_count(), 0u);
    for (std::size_t t = 0; t < r.minutes; ++t) {
      for (const auto& g : ds.schema.groups) {
        std::size_t obs = 0;
        for (auto c : g.channels) obs += r.is_observed(t, c);
        EXPECT_TRUE(obs == 0 || obs == g.channels.size());
      }
    }
  }
}

TEST(Generator, RealizedFractionTracksTarget) {
  auto ds = generate_synthetic(small_config(200), 4);
  for (const auto& r : ds.records) {
    ASSERT_TRUE(r.target_missing_fraction.has_value());
    EXPECT_LE(std::abs(r.missing_fraction() - *r.target_missing_fraction), 0.05 + 1e-12);
    EXPECT_LE(r.missing_fraction(), kMaxMissingFraction);
    for (std::size_t k = 0; k < r.values.size(); ++k) {
      if (!r.observed[k]) {
        EXPECT_EQ(r.values[k], 0.0);
      }
    }
  }
}

TEST(Generator, MeanMissingFractionMatchesProfile) {
  GeneratorConfig cfg;  // full-size day, 26 channels, default profile
  cfg.records = 1000;
  auto rep = missingness_stats(generate_synthetic(cfg, 5));
  EXPECT_GE(rep.mean_fraction, 0.44);
  EXPECT_LE(rep.mean_fraction, 0.54);
}

TEST(Generator, DeterministicBytes) {
  auto cfg = small_config(10);
  auto a = temp_path("det_a.csv"), b = temp_path("det_b.csv");
  save_csv(generate_synthetic(cfg, 9), a);
  save_csv(generate_synthetic(cfg, 9), b);
  EXPECT_EQ(slurp(a), slurp(b));
  save_csv(generate_synthetic(cfg, 10), b);
  EXPECT_NE(slurp(a), slurp(b));
}

TEST(Generator, InfeasibleTargetRaises) {
  auto cfg = small_config(1);
  cfg.profile.weight_device_off = 1.0;
  cfg.profile.weight_sensor_off = 0.0;
  cfg.profile.weight_point_noise = 0.0;
  cfg.profile.device_off_min = 140;
  cfg.profile.device_off_max = 140;
  cfg.profile.forced_target = 0.3;
  EXPECT_THROW(generate_synthetic(cfg, 1), GenerationError);
}

TEST(Generator, RejectsBadShapes) {
  auto cfg = small_config(1);
  cfg.patch = 7;
  EXPECT_THROW(generate_synthetic(cfg, 1), ConfigError);
  cfg = small_config(1);
  cfg.profile.weight_point_noise = 0.5;
  EXPECT_THROW(generate_synthetic(cfg, 1), ConfigError);
}

TEST(Generator, LabelsComeFromLatents) {
  auto ds = generate_synthetic(small_config(100), 6);
  std::vector<int> counts(3, 0);
  for (const auto& r : ds.records) {
    double cls = r.labels.at(kActivityLabel), amp = r.labels.at(kAmplitudeLabel);
    ASSERT_TRUE(cls == 0 || cls == 1 || cls == 2);
    counts[static_cast<int>(cls)]++;
    EXPECT_GE(amp, 0.5);
    EXPECT_LE(amp, 2.0);
  }
  for (int c : counts) EXPECT_GT(c, 15);
}

TEST(Csv, RoundtripPreservesValuesAndBitmap) {
  auto ds = generate_synthetic(small_config(6), 7);
  auto path = temp_path("roundtrip.csv");
  save_csv(ds, path);
  auto back = load_csv(path, 8);
  ASSERT_EQ(back.records.size(), ds.records.size());
  EXPECT_EQ(back.minutes, 144u);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].id, ds.records[i].id);
    EXPECT_EQ(back.records[i].observed, ds.records[i].observed);
    EXPECT_EQ(back.records[i].values, ds.records[i].values);
    EXPECT_EQ(back.records[i].labels, ds.records[i].labels);
  }
}

TEST(Csv, EmptyCellIsMissing) {
  auto path = temp_path("empty.csv");
  write_file(path, "record_id,minute,ch_0,ch_1\nr,0,1.5,\nr,1,,2\n");
  auto ds = load_csv(path);
  ASSERT_EQ(ds.records.size(), 1u);
  const auto& r = ds.records[0];
  EXPECT_TRUE(r.is_observed(0, 0));
  EXPECT_FALSE(r.is_observed(0, 1));
  EXPECT_FALSE(r.is_observed(1, 0));
  EXPECT_EQ(r.value(0, 1), 0.0);
  EXPECT_EQ(r.value(1, 1), 2.0);
}

void expect_parse_error_at(const std::string& body, std::size_t line, std::optional<std::size_t> channels = {}) {
  auto path = temp_path("bad.csv");
  write_file(path, body);
  try {
    load_csv(path, channels);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), line) << e.what();
    EXPECT_NE(std::string(e.what()).find("line " + std::to_string(line)), std::string::npos) << e.what();
  }
}

TEST(Csv, ParseErrorsNameTheLine) {
  // 27 fields on a row of a 26-channel file.
  std::string header = "record_id,minute";
  for (int c = 0; c < 26; ++c) header += ",ch_" + std::to_string(c);
  std::string good = "r,0" + std::string(26, ',');
  std::string bad = "r,1" + std::string(27, ',');
  expect_parse_error_at(header + "\n" + good + "\n" + bad + "\n", 3, 26);
  expect_parse_error_at("record_id,minute,ch_0\nr,0,abc\n", 2);
  expect_parse_error_at("record_id,minute,ch_0,ch_1\n", 1, 26);
  expect_parse_error_at("record_id,minute,ch_0,label_y\nr,0,1,0\nr,1,1,1\n", 3);
}

TEST(Csv, MinutesMustCoverTheDay) {
  auto path = temp_path("gap.csv");
  write_file(path, "record_id,minute,ch_0\na,0,1\na,1,1\nb,0,1\nb,2,1\n");
  EXPECT_THROW(load_csv(path), ParseError);
}

TEST(Csv, MissingnessBoundOnIngestion) {
  // 10 minutes x 1 channel: 8 missing is exactly 0.8 (kept), 9 missing is rejected.
  std::string body = "record_id,minute,ch_0,ch_1\n";
  for (int t = 0; t < 10; ++t) body += "keep," + std::to_string(t) + "," + (t < 4 ? "1" : "") + ",\n";
  for (int t = 0; t < 10; ++t) body += "drop," + std::to_string(t) + "," + (t < 3 ? "1" : "") + ",\n";
  auto path = temp_path("bound.csv");
  write_file(path, body);
  auto ds = load_csv(path);
  ASSERT_EQ(ds.records.size(), 1u);
  EXPECT_EQ(ds.records[0].id, "keep");
  EXPECT_DOUBLE_EQ(ds.records[0].missing_fraction(), 0.8);
  EXPECT_EQ(ds.rejected_ids, std::vector<std::string>{"drop"});
}

Dataset toy(std::vector<std::vector<double>> rows, std::vector<std::vector<int>> obs) {
  Dataset ds;
  ds.schema = ChannelSchema::proportional(2);
  ds.minutes = rows[0].size() / 2;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    SensorRecord r;
    r.id = "r" + std::to_string(i);
    r.minutes = ds.minutes;
    r.channels = 2;
    r.values = rows[i];
    r.observed.assign(obs[i].begin(), obs[i].end());
    ds.records.push_back(r);
  }
  return ds;
}

TEST(Standardize, DefinitionAndTrainOnlyStats) {
  // Channel 0 observed values {2, 4}; channel 1 observed {1, 5, 9}.
  auto ds = toy({{2, 1, 4, 5, 99, 9}, {10, 3, 0, 7, 0, 0}}, {{1, 1, 1, 1, 0, 1}, {1, 1, 0, 1, 0, 0}});
  auto st = fit_standardization(ds, {0});
  EXPECT_DOUBLE_EQ(st.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(st.stddev[0], 1.0);
  auto z = apply_standardization(ds, st);
  EXPECT_DOUBLE_EQ(z.records[0].value(1, 0), (4.0 - 3.0) / st.stddev[0]);
  EXPECT_EQ(z.records[0].value(2, 0), 99.0);  // unobserved untouched
  double m0 = 0, m1 = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    if (z.records[0].is_observed(t, 0)) m0 += z.records[0].value(t, 0);
    if (z.records[0].is_observed(t, 1)) m1 += z.records[0].value(t, 1);
  }
  EXPECT_NEAR(m0, 0.0, 1e-10);
  EXPECT_NEAR(m1, 0.0, 1e-10);
  auto own = apply_standardization(ds, fit_standardization(ds, {1}));
  EXPECT_NE(own.records[1].value(0, 0), z.records[1].value(0, 0));
}

TEST(Standardize, ConstantChannelGetsUnitStdAndWarning) {
  auto ds = toy({{5, 1, 5, 2}}, {{1, 1, 1, 1}});
  auto st = fit_standardization(ds, {0});
  EXPECT_EQ(st.stddev[0], 1.0);
  ASSERT_EQ(st.warnings.size(), 1u);
  EXPECT_THROW(fit_standardization(ds, {}), ConfigError);
}

TEST(Stats, AllObservedAndHalfChannelGap) {
  auto ds = toy({{1, 1, 1, 1, 1, 1, 1, 1}}, {{1, 1, 1, 1, 1, 1, 1, 1}});
  auto rep = missingness_stats(ds);
  EXPECT_EQ(rep.per_record_fraction, std::vector<double>{0.0});
  EXPECT_EQ(rep.per_channel_prevalence, (std::vector<double>{0.0, 0.0}));
  auto half = toy({{0, 1, 0, 1, 1, 1, 1, 1}}, {{0, 1, 0, 1, 1, 1, 1, 1}});
  auto rh = missingness_stats(half);
  EXPECT_EQ(rh.gap_lengths[0], (std::map<std::size_t, std::size_t>{{2, 1}}));
  EXPECT_TRUE(rh.gap_lengths[1].empty());
  auto j = rh.to_json();
  EXPECT_TRUE(j.contains("per_record_fraction") && j.contains("per_channel_prevalence") &&
              j.contains("gap_length_histogram"));
  EXPECT_TRUE(j["per_record_fraction"].contains("bins") && j["per_record_fraction"].contains("counts"));
}

TEST(Stats, FixedWindowsConcentrateGapHistogram) {
  GeneratorConfig cfg;
  cfg.records = 40;
  cfg.profile.weight_device_off = 1.0;
  cfg.profile.weight_sensor_off = 0.0;
  cfg.profile.weight_point_noise = 0.0;
  cfg.profile.device_off_min = cfg.profile.device_off_max = 60;
  auto rep = missingness_stats(generate_synthetic(cfg, 8));
  std::size_t at60 = 0, total = 0;
  for (const auto& [len, n] : rep.gap_lengths[0]) {
    total += n;
    if (len == 60) at60 += n;
  }
  ASSERT_GT(total, 0u);
  EXPECT_GE(static_cast<double>(at60) / static_cast<double>(total), 0.8);
}

}  // namespace
}  // namespace aim
