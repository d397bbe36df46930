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

// aim_cli: data generation, pre-training, evaluation, probing and the masking
// benchmark. Exit codes: 0 success, 1 usage or config error, 2 runtime error.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aim/checkpoint.hpp"
#include "aim/config.hpp"
#include "aim/evaluate.hpp"
#include "aim/imputers.hpp"
#include "aim/model.hpp"
#include "aim/pretrain.hpp"
#include "aim/runtime.hpp"
#include "aim/sensor_data.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace aim;

namespace {

struct Args {
  std::string command;
  std::string config;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::string out;
  std::string checkpoint;
  std::string resume;
  std::vector<std::string> overrides;
};

RunConfig resolve(const Args& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg.load_file(a.config);
  for (const auto& o : a.overrides) cfg.apply_override(o);
  return cfg;
}

std::uint64_t need_seed(const Args& a) {
  if (!a.has_seed) throw ConfigError(a.command + " is randomized and requires --seed");
  return a.seed;
}

fs::path need_out(const Args& a) {
  if (a.out.empty()) throw ConfigError(a.command + " requires --out DIR");
  return a.out;
}

Dataset load_data(const RunConfig& cfg, const std::string& key) {
  const std::string& path = cfg.str(key);
  if (path.empty()) throw ConfigError(key + " is not set");
  Dataset ds = load_csv(path, cfg.count("data.channels"));
  if (ds.minutes != cfg.count("data.minutes")) {
    throw ConfigError(path + " holds " + std::to_string(ds.minutes) + "-minute records but data.minutes is " +
                      cfg.str("data.minutes"));
  }
  return ds;
}

// Raw train split, raw held-out records (data.eval_path when set) and the
// standardization fitted on the train split.
struct Splits {
  Dataset train, held_out;
  Standardization fitted;
};

Splits load_splits(const RunConfig& cfg) {
  Dataset all = load_data(cfg, "data.path");
  auto [tr, ho] = positional_split(all.size(), cfg.real("data.train_fraction"));
  if (tr.empty()) throw ConfigError("no training records: raise data.train_fraction");
  Splits s{all.subset(tr), cfg.str("data.eval_path").empty() ? all.subset(ho) : load_data(cfg, "data.eval_path"),
           fit_standardization(all, tr)};
  return s;
}

void require_held_out(const Dataset& d) {
  if (d.records.empty()) throw ConfigError("no held-out records: lower data.train_fraction or set data.eval_path");
}

std::string checkpoint_path(const Args& a, const RunConfig& cfg) {
  std::string p = a.checkpoint.empty() ? cfg.str("eval.checkpoint") : a.checkpoint;
  if (p.empty()) throw ConfigError(a.command + " requires --checkpoint DIR or eval.checkpoint");
  return p;
}

std::string checkpoint_dtype(const std::string& dir) { return CheckpointReader(dir).meta().at("dtype"); }

nlohmann::json checkpoint_meta(const std::string& dir) {
  const nlohmann::json m = CheckpointReader(dir).meta();
  const std::size_t step = m.at("step");
  return {{"checkpoint", dir},
          {"step", step},
          {"untrained", step == 0},
          {"ablation", m.at("train").at("ablation")},
          {"dtype", m.at("dtype")}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Args& a) {
  const RunConfig cfg = resolve(a);
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  const Dataset ds = generate_synthetic(cfg.generator(), seed);
  fs::create_directories(out);
  save_csv(ds, (out / "data.csv").string());
  const auto stats = missingness_stats(ds);
  write_json(out / "missingness.json", stats.to_json());
  cfg.write(out);
  std::printf("wrote %zu records to %s (mean missing fraction %.4f)\n", ds.size(), (out / "data.csv").c_str(),
              stats.mean_fraction);
  return 0;
}

int cmd_stats(const Args& a) {
  const RunConfig cfg = resolve(a);
  const nlohmann::json j = missingness_stats(load_data(cfg, "data.path")).to_json();
  if (a.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "missingness.json", j);
    cfg.write(a.out);
  }
  return 0;
}

template <class S>
int cmd_pretrain(const Args& a, const RunConfig& cfg) {
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  const TrainConfig tc = cfg.train(seed);
  const MaskingConfig mc = cfg.masking();
  const ModelConfig model = cfg.model();
  const Splits sp = load_splits(cfg);
  const Dataset train_set = apply_standardization(sp.train, sp.fitted);
  cfg.write(out);

  TrainState<S> st;
  if (a.resume.empty()) {
    st = init_train_state<S>(model, seed);
  } else {
    st = load_checkpoint<S>(a.resume, nullptr, model);
    std::fprintf(stderr, "resuming from %s at step %zu\n", a.resume.c_str(), st.step);
  }
  TrainOptions opts;
  opts.out_dir = out;
  opts.info.standardization = sp.fitted;
  opts.info.extra = {{"seed", seed}, {"data", cfg.str("data.path")}, {"train_records", train_set.size()}};
  const std::size_t every = std::max<std::size_t>(1, tc.total_steps / 20);
  opts.on_step = [&](const LossPoint& p) {
    if (p.step % every == 0 || p.step == tc.total_steps) {
      std::fprintf(stderr, "step %zu/%zu lr %.3g loss %.5f\n", p.step, tc.total_steps, p.lr, p.loss);
    }
  };
  fs::create_directories(out);
  train(st, train_set, mc, tc, opts);
  write_json(out / "run.json", {{"ablation", ablation_name(tc.ablation)},
                                {"seed", seed},
                                {"dtype", dtype_name<S>()},
                                {"total_steps", tc.total_steps},
                                {"final_step", st.step},
                                {"train_records", train_set.size()},
                                {"final_checkpoint", (out / "final").string()}});
  std::printf("final checkpoint %s (step %zu)\n", (out / "final").c_str(), st.step);
  return 0;
}

template <class S>
int cmd_eval(const Args& a, const RunConfig& cfg, const std::string& ckpt) {
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  RunInfo info;
  const TrainState<S> st = load_checkpoint<S>(ckpt, &info, cfg.model());
  const Dataset held = apply_standardization(load_splits(cfg).held_out, info.standardization);
  require_held_out(held);
  EvalOptions opts = cfg.eval_options(seed);
  // Ablated models are scored under the input protocol they were trained on.
  opts.impute_input = info.train.ablation == Ablation::kNoInheritance;
  const TokenGrid grid = st.model.config.grid();
  EvalReport rep;
  rep.meta = checkpoint_meta(ckpt);
  rep.meta["seed"] = seed;
  rep.meta["records"] = held.size();
  rep.meta["trials"] = opts.trials;
  rep.meta["model_input"] = opts.impute_input ? "linear_imputed" : "inherited_mask";
  for (const auto& task : cfg.eval_tasks()) {
    rep.add_score(task, "model", eval_generative(st.model, held, task, opts));
    for (Imputer k : {Imputer::kLinear, Imputer::kNearest, Imputer::kMean}) {
      rep.add_score(task, std::string(imputer_name(k)), eval_baseline_imputer(held, task, k, opts, grid));
    }
    std::fprintf(stderr, "evaluated %s\n", task.label().c_str());
  }
  rep.write(out, "eval");
  cfg.write(out);
  std::printf("wrote %s\n", (out / "eval.csv").c_str());
  return 0;
}

void add_metric_rows(EvalReport& rep, const std::string& label, const std::string& condition, const MetricMap& m,
                     const MetricMap* err, const std::string& prefix, std::size_t n) {
  for (const auto& [name, v] : m) {
    std::optional<double> se;
    if (err) se = err->at(name);
    rep.rows.push_back({"probe", label, condition, prefix + name, v, se, n, 0});
  }
}

template <class S>
int cmd_probe(const Args& a, const RunConfig& cfg, const std::string& ckpt) {
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  RunInfo info;
  const TrainState<S> st = load_checkpoint<S>(ckpt, &info, cfg.model());
  const Splits sp = load_splits(cfg);
  const Dataset train_set = apply_standardization(sp.train, info.standardization);
  const Dataset test = apply_standardization(sp.held_out, info.standardization);
  require_held_out(test);
  const double tau = cfg.real("masking.tau");
  const auto specs = cfg.probes();
  const auto conditions = cfg.conditions(test.schema);

  // Labels first so a missing label fails before any embedding work.
  std::vector<std::pair<std::vector<double>, std::vector<double>>> labels;
  for (const auto& p : specs) {
    try {
      labels.emplace_back(labels_of(train_set, p.label), labels_of(test, p.label));
    } catch (const ConfigError& e) {
      throw ConfigError("probe task '" + p.label + "': " + e.what());
    }
  }
  const Eigen::MatrixXd x_train = embed_dataset(st.model, train_set, tau, nullptr, cfg.count("eval.batch_size"));
  const Eigen::MatrixXd x_test = embed_dataset(st.model, test, tau, nullptr, cfg.count("eval.batch_size"));

  EvalReport rep;
  rep.meta = checkpoint_meta(ckpt);
  rep.meta["seed"] = seed;
  rep.meta["train_records"] = train_set.size();
  rep.meta["test_records"] = test.size();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& [ytr, yte] = labels[i];
    std::size_t classes = 0;
    if (specs[i].kind != ProbeKind::kRegression) {
      for (double v : ytr) classes = std::max(classes, static_cast<std::size_t>(std::max(0.0, v)) + 1);
      for (double v : yte) classes = std::max(classes, static_cast<std::size_t>(std::max(0.0, v)) + 1);
      if (specs[i].kind == ProbeKind::kBinary && classes > 2) {
        throw ConfigError("probe task '" + specs[i].label + "' is binary but has " + std::to_string(classes) +
                          " classes");
      }
      classes = std::max<std::size_t>(classes, 2);
    }
    ProbeConfig pc;
    pc.steps = cfg.count("eval.probe_steps");
    pc.lr = cfg.real("eval.probe_lr");
    pc.seed = seed;
    const LinearProbe probe = fit_probe(x_train, ytr, specs[i].kind, classes, pc);
    if (specs[i].kind != ProbeKind::kRegression) {
      rep.rows.push_back({"probe", specs[i].label, "majority", "accuracy", majority_accuracy(yte), std::nullopt,
                          yte.size(), 0});
    }
    for (const auto& row : robustness_sweep(st.model, test, probe, yte, conditions, tau, cfg.count("eval.bootstrap"),
                                            seed)) {
      if (row.failed) {
        rep.rows.push_back({"probe", specs[i].label, row.condition, "failed", std::nullopt, std::nullopt, 0, 0});
        std::fprintf(stderr, "%s %s: %s\n", specs[i].label.c_str(), row.condition.c_str(), row.reason.c_str());
        continue;
      }
      add_metric_rows(rep, specs[i].label, row.condition, row.metrics, nullptr, "", yte.size());
      if (row.condition != "baseline") {
        add_metric_rows(rep, specs[i].label, row.condition, row.delta, &row.delta_stderr, "delta_", yte.size());
      }
    }
    std::fprintf(stderr, "probed %s\n", specs[i].label.c_str());
  }
  rep.write(out, "probe");
  cfg.write(out);
  std::printf("wrote %s\n", (out / "probe.csv").c_str());
  return 0;
}

int cmd_impute(const Args& a) {
  const RunConfig cfg = resolve(a);
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  const Splits sp = load_splits(cfg);
  const Dataset held = apply_standardization(sp.held_out, sp.fitted);
  require_held_out(held);
  const TokenGrid grid = TokenGrid::make(cfg.count("data.minutes"), cfg.count("data.channels"), cfg.count("data.patch"));
  const EvalOptions opts = cfg.eval_options(seed);
  EvalReport rep;
  rep.meta = {{"seed", seed}, {"records", held.size()}, {"trials", opts.trials}};
  for (const auto& task : cfg.eval_tasks()) {
    for (Imputer k : {Imputer::kLinear, Imputer::kNearest, Imputer::kMean}) {
      rep.add_score(task, std::string(imputer_name(k)), eval_baseline_imputer(held, task, k, opts, grid));
    }
  }
  rep.write(out, "impute");
  cfg.write(out);
  std::printf("wrote %s\n", (out / "impute.csv").c_str());
  return 0;
}

template <class S>
int cmd_bench(const Args& a, const RunConfig& cfg) {
  const auto seed = need_seed(a);
  const fs::path out = need_out(a);
  const std::size_t E = cfg.count("model.embed"), heads = cfg.count("model.heads"), ratio = cfg.count("model.mlp_ratio");
  const std::size_t repeats = cfg.count("bench.repeats");
  std::ostringstream csv;
  csv << "tokens,dropped,kept,score_flops,layer_flops,score_flop_ratio,seconds,speedup\n";
  for (double nd : cfg.reals("bench.tokens")) {
    const auto N = static_cast<std::size_t>(nd);
    if (N == 0 || static_cast<double>(N) != nd) throw ConfigError("bench.tokens entries must be positive integers");
    const EncoderFlops full = encoder_flops(N, E, ratio, 1);
    std::optional<double> base_time;
    for (double frac : cfg.reals("bench.drop")) {
      if (!(frac >= 0 && frac < 1)) throw ConfigError("bench.drop entries must lie in [0, 1)");
      const auto D = static_cast<std::size_t>(std::llround(frac * static_cast<double>(N)));
      const EncoderFlops f = encoder_flops(N - D, E, ratio, 1);
      const double secs = time_encoder_layer<S>(N, D, E, heads, ratio, repeats, seed);
      if (D == 0) base_time = secs;
      csv << N << ',' << D << ',' << N - D << ',' << format_number(f.attention_scores) << ','
          << format_number(f.total()) << ',' << format_number(full.attention_scores / f.attention_scores) << ','
          << format_number(secs) << ',' << (base_time ? format_number(*base_time / secs) : "NA") << '\n';
      std::fprintf(stderr, "N=%zu D=%zu %.4fs\n", N, D, secs);
    }
  }
  fs::create_directories(out);
  std::ofstream f(out / "bench_mask.csv", std::ios::trunc);
  f << csv.str();
  if (!f) throw Error("cannot write " + (out / "bench_mask.csv").string());
  cfg.write(out);
  std::cout << csv.str();
  return 0;
}

int dispatch(const Args& a) {
  if (a.command == "gen-data") return cmd_gen_data(a);
  if (a.command == "stats") return cmd_stats(a);
  if (a.command == "impute") return cmd_impute(a);
  const RunConfig cfg = resolve(a);
  if (a.command == "pretrain") return cfg.double_precision() ? cmd_pretrain<double>(a, cfg) : cmd_pretrain<float>(a, cfg);
  if (a.command == "bench-mask") return cfg.double_precision() ? cmd_bench<double>(a, cfg) : cmd_bench<float>(a, cfg);
  const std::string ckpt = checkpoint_path(a, cfg);
  const bool dbl = checkpoint_dtype(ckpt) == "float64";
  if (a.command == "eval") return dbl ? cmd_eval<double>(a, cfg, ckpt) : cmd_eval<float>(a, cfg, ckpt);
  if (a.command == "probe") return dbl ? cmd_probe<double>(a, cfg, ckpt) : cmd_probe<float>(a, cfg, ckpt);
  throw ConfigError("unknown command " + a.command);
}

// CLI11 hands unknown `--a.b=v` / `--a.b v` tokens back as extras; rejoin them.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string s = extras[i];
    if (s.find('=') == std::string::npos && i + 1 < extras.size() && !extras[i + 1].starts_with("--")) {
      s += "=" + extras[++i];
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Adaptive and inherited masking for incomplete multimodal sensor data"};
  app.require_subcommand(1, 1);
  Args args;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic dataset and its missingness report"},
      {"pretrain", "pre-train a masked autoencoder"},
      {"eval", "score generative tasks for a checkpoint and the baseline imputers"},
      {"probe", "fit linear probes on pooled embeddings and run the robustness sweep"},
      {"impute", "score the baseline imputers only"},
      {"bench-mask", "time single encoder layers over a grid of token and drop counts"},
      {"stats", "missingness statistics of a dataset"}};
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", args.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "random seed");
    sub->add_option("--out", args.out, "output directory");
    if (name == "eval" || name == "probe") sub->add_option("--checkpoint", args.checkpoint, "checkpoint directory");
    if (name == "pretrain") sub->add_option("--resume", args.resume, "checkpoint to continue from");
    sub->allow_extras();
    sub->footer("Config keys may be overridden as --section.key=value.");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    args.command = sub->get_name();
    args.has_seed = sub->get_option("--seed")->count() > 0;
    args.overrides = collect_overrides(sub->remaining());
  }
  try {
    return dispatch(args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "aim_cli %s: config error: %s\n", args.command.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "aim_cli %s: error: %s\n", args.command.c_str(), e.what());
    return 2;
  }
}
