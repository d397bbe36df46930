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

// Run configuration: an INI file with [data] [masking] [model] [train] [eval]
// sections, overridden by `section.key=value` pairs. Every key has a default
// and unknown keys are rejected.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aim/errors.hpp"
#include "aim/evaluate.hpp"
#include "aim/masking.hpp"
#include "aim/model.hpp"
#include "aim/pretrain.hpp"
#include "aim/sensor_data.hpp"

namespace aim {

inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> k = {
      // Dataset generation and loading.
      {"data.path", ""},
      {"data.eval_path", ""},
      {"data.records", "100"},
      {"data.minutes", "1440"},
      {"data.channels", "26"},
      {"data.patch", "10"},
      {"data.noise_std", "0.3"},
      {"data.missing_mean", "0.49"},
      {"data.missing_std", "0.15"},
      {"data.missing_forced", ""},
      {"data.activity_classes", "3"},
      {"data.train_fraction", "0.8"},
      // Masking.
      {"masking.mix", "random_imputation:0.8,temporal_slice:0.5,signal_slice:0.5"},
      {"masking.drop_fraction", "0.5"},
      {"masking.tau", "1.0"},
      // Model (the token grid comes from [data]).
      {"model.embed", "384"},
      {"model.encoder_layers", "12"},
      {"model.decoder_layers", "4"},
      {"model.heads", "6"},
      {"model.decoder_width", "0"},
      {"model.decoder_heads", "0"},
      {"model.mlp_ratio", "4"},
      // Training.
      {"train.base_lr", "5e-3"},
      {"train.weight_decay", "1e-4"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.95"},
      {"train.eps", "1e-8"},
      {"train.grad_clip", "1.0"},
      {"train.warmup_fraction", "0.05"},
      {"train.total_steps", "1000"},
      {"train.batch_size", "32"},
      {"train.ablation", "full_aim"},
      {"train.checkpoint_every", "0"},
      {"train.dtype", "float32"},
      // Evaluation.
      {"eval.checkpoint", ""},
      {"eval.tasks",
       "random_imp:0.3,random_imp:0.5,random_imp:0.8,temporal_interp:10,temporal_interp:30,temporal_interp:60,"
       "temporal_extrap:10,temporal_extrap:30,temporal_extrap:60,signal_imp:2,signal_imp:6,signal_imp:12"},
      {"eval.extended", "false"},
      {"eval.trials", "1"},
      {"eval.batch_size", "64"},
      {"eval.probes", "activity:multiclass,amplitude:regression"},
      {"eval.probe_steps", "500"},
      {"eval.probe_lr", "5e-3"},
      {"eval.conditions", "all"},
      {"eval.bootstrap", "200"},
      // Single-layer masking benchmark; drop entries are fractions of tokens.
      {"bench.tokens", "936,1872,3744"},
      {"bench.drop", "0,0.25,0.5"},
      {"bench.repeats", "3"},
  };
  return k;
}

class RunConfig {
 public:
  RunConfig() : values_(config_defaults()) {}

  // Reads an INI file; keys must be known and appear at most once.
  void load_file(const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("cannot parse config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config key '" + section + "' must live in a section");
      for (const auto& [key, value] : body) set(section + "." + key, value.data());
    }
  }

  // `key=value` with a dotted key; a leading "--" is accepted.
  void apply_override(std::string_view arg) {
    if (arg.starts_with("--")) arg.remove_prefix(2);
    const auto eq = arg.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(arg) + "' is not key=value");
    set(std::string(arg.substr(0, eq)), std::string(arg.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const { return to_real(key, str(key)); }

  static double to_real(const std::string& key, const std::string& s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + " must be a number, got '" + s + "'");
    return v;
  }

  std::size_t count(const std::string& key) const {
    const auto& s = str(key);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError(key + " must be a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split(str(key))) out.push_back(to_real(key, item));
    return out;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + " must be true or false, got '" + s + "'");
  }

  // Resolved configuration as INI, sections and keys in sorted order.
  std::string to_ini() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [key, value] : values_) {
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot);
      if (sec != section) {
        os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
        section = sec;
      }
      os << key.substr(dot + 1) << " = " << value << '\n';
    }
    return os.str();
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.ini", std::ios::trunc);
    out << to_ini();
    if (!out) throw Error("cannot write " + (dir / "config.ini").string());
  }

  // -------------------------------------------------------------------------
  // Typed views.

  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.records = count("data.records");
    g.minutes = count("data.minutes");
    g.channels = count("data.channels");
    g.patch = count("data.patch");
    g.noise_std = real("data.noise_std");
    g.activity_classes = count("data.activity_classes");
    g.profile = MissingnessProfile::for_day_length(g.minutes);
    g.profile.target_mean = real("data.missing_mean");
    g.profile.target_std = real("data.missing_std");
    if (!str("data.missing_forced").empty()) g.profile.forced_target = real("data.missing_forced");
    return g;
  }

  MaskingConfig masking() const {
    MaskingConfig m;
    m.mix.clear();
    for (const auto& item : split(str("masking.mix"))) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("masking.mix entry '" + item + "' is not strategy:ratio");
      m.mix.push_back({parse_strategy(item.substr(0, colon)), to_real("masking.mix", item.substr(colon + 1))});
    }
    m.drop_fraction = real("masking.drop_fraction");
    m.tau = real("masking.tau");
    m.validate();
    return m;
  }

  ModelConfig model() const {
    ModelConfig c;
    c.minutes = count("data.minutes");
    c.channels = count("data.channels");
    c.patch = count("data.patch");
    c.embed = count("model.embed");
    c.encoder_layers = count("model.encoder_layers");
    c.decoder_layers = count("model.decoder_layers");
    c.heads = count("model.heads");
    c.decoder_width = count("model.decoder_width");
    c.decoder_heads = count("model.decoder_heads");
    c.mlp_ratio = count("model.mlp_ratio");
    c.validate();
    return c;
  }

  TrainConfig train(std::uint64_t seed) const {
    TrainConfig t;
    t.base_lr = real("train.base_lr");
    t.weight_decay = real("train.weight_decay");
    t.beta1 = real("train.beta1");
    t.beta2 = real("train.beta2");
    t.eps = real("train.eps");
    t.grad_clip = real("train.grad_clip");
    t.warmup_fraction = real("train.warmup_fraction");
    t.total_steps = count("train.total_steps");
    t.batch_size = count("train.batch_size");
    t.ablation = parse_ablation(str("train.ablation"));
    t.checkpoint_every = count("train.checkpoint_every");
    t.seed = seed;
    t.validate();
    return t;
  }

  bool double_precision() const {
    const auto& d = str("train.dtype");
    if (d == "float64") return true;
    if (d == "float32") return false;
    throw ConfigError("train.dtype must be float32 or float64, got '" + d + "'");
  }

  std::vector<EvalTask> eval_tasks() const {
    std::vector<EvalTask> out;
    const bool ext = flag("eval.extended");
    for (const auto& item : split(str("eval.tasks"))) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("eval.tasks entry '" + item + "' is not kind:param");
      EvalTask t;
      t.kind = parse_eval_kind(item.substr(0, colon));
      if (t.kind == EvalKind::kTargetedGroup || t.kind == EvalKind::kTargetedWindow) {
        t.target = item.substr(colon + 1);
      } else {
        t.param = to_real("eval.tasks", item.substr(colon + 1));
      }
      t.extended = ext;
      out.push_back(t);
    }
    return out;
  }

  struct ProbeSpec {
    std::string label;
    ProbeKind kind;
  };

  std::vector<ProbeSpec> probes() const {
    std::vector<ProbeSpec> out;
    for (const auto& item : split(str("eval.probes"))) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("eval.probes entry '" + item + "' is not label:kind");
      out.push_back({item.substr(0, colon), parse_probe_kind(item.substr(colon + 1))});
    }
    return out;
  }

  std::vector<EvalTask> conditions(const ChannelSchema& schema) const {
    const auto& s = str("eval.conditions");
    if (s == "all") return standard_conditions(schema);
    if (s == "none") return {};
    std::vector<EvalTask> out;
    for (const auto& item : split(s)) {
      if (item.starts_with("group:")) {
        out.push_back({EvalKind::kTargetedGroup, 0, item.substr(6), false});
      } else if (item.starts_with("window:")) {
        out.push_back({EvalKind::kTargetedWindow, 0, item.substr(7), false});
      } else {
        throw ConfigError("eval.conditions entry '" + item + "' must be group:<name> or window:<name>");
      }
    }
    return out;
  }

  EvalOptions eval_options(std::uint64_t seed) const {
    EvalOptions o;
    o.trials = count("eval.trials");
    o.batch_size = count("eval.batch_size");
    o.tau = real("masking.tau");
    o.seed = seed;
    return o;
  }

 private:
  static std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
      if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

// Records [0, floor(f * n)) train, the rest are held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> positional_split(std::size_t n, double f) {
  if (!(f > 0 && f <= 1)) throw ConfigError("data.train_fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < n; ++i) (i < k ? a : b).push_back(i);
  return {a, b};
}

}  // namespace aim
