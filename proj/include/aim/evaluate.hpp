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

// Downstream evaluation: masked-reconstruction scoring for the model and the
// classical imputers on shared masks, linear/logistic probes on pooled
// embeddings, classification/regression metrics and targeted-missingness
// robustness sweeps.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

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

// ---------------------------------------------------------------------------
// Shared evaluation masks.

struct EvalOptions {
  std::size_t trials = 1;  // masks drawn per record
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  double tau = 1.0;  // inherited-mask threshold
  // Input protocol of the no_inheritance ablation: no inherited tokens, and
  // every hidden pixel linearly imputed from the visible ones.
  bool impute_input = false;
};

// One scored (record, trial) instance. `scored` marks the pixels (t*S + c)
// that both the model and every baseline are scored on.
struct EvalCase {
  std::size_t record = 0;
  std::size_t trial = 0;
  TokenMask inherited;
  TokenMask artificial;
  std::vector<std::uint8_t> scored;
  std::size_t pixels = 0;
};

inline std::vector<EvalCase> build_eval_cases(const Dataset& ds, const EvalTask& task, const TokenGrid& grid,
                                              const EvalOptions& opts) {
  task.validate(grid);
  if (opts.trials == 0) throw ConfigError("eval.trials must be positive");
  const std::size_t T = grid.minutes, C = grid.channels;
  std::vector<EvalCase> out;
  out.reserve(ds.size() * opts.trials);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const SensorRecord& rec = ds.records[r];
    if (rec.minutes != T || rec.channels != C) throw ContractViolation("record " + rec.id + " does not match the grid");
    TokenMask inh = derive_inherited_mask(rec, grid, opts.tau);
    for (std::size_t k = 0; k < opts.trials; ++k) {
      Rng rng = Rng::stream(opts.seed, "eval:" + task.label(), r * opts.trials + k);
      EvalCase ec;
      ec.record = r;
      ec.trial = k;
      ec.inherited = inh;
      ec.artificial = build_eval_mask(task, inh, grid, ds.schema, rng);
      ec.scored.assign(T * C, 0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
          if (rec.observed[t * C + c] && ec.artificial[grid.index(c, t / grid.patch)]) {
            ec.scored[t * C + c] = 1;
            ++ec.pixels;
          }
      out.push_back(std::move(ec));
    }
  }
  return out;
}

// Per-record masked MSEs and their aggregate.
struct ScoreSummary {
  bool applicable = true;
  double mean = 0;
  double stderr_ = 0;
  std::size_t count = 0;    // scored (record, trial) instances
  std::size_t pixels = 0;   // total pixels averaged over
  std::size_t skipped = 0;  // instances with nothing to score
  // Keyed by record * trials + trial so paired comparisons line up.
  std::map<std::size_t, double> per_case;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Standard error of the mean using the sample standard deviation.
inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
}

inline void finalize_summary(ScoreSummary& s) {
  std::vector<double> v;
  for (const auto& [k, x] : s.per_case) v.push_back(x);
  s.count = v.size();
  s.mean = mean_of(v);
  s.stderr_ = stderr_of(v);
}

struct PairedDelta {
  double mean = 0;  // b - a
  double stderr_ = 0;
  std::size_t count = 0;
};

// Paired difference b - a over the instances scored by both.
inline PairedDelta paired_delta(const ScoreSummary& a, const ScoreSummary& b) {
  std::vector<double> d;
  for (const auto& [k, x] : a.per_case) {
    auto it = b.per_case.find(k);
    if (it != b.per_case.end()) d.push_back(it->second - x);
  }
  return {mean_of(d), stderr_of(d), d.size()};
}

// ---------------------------------------------------------------------------
// Generative scoring.

template <class S>
Tensor<S> batch_input(const Dataset& ds, const std::vector<std::size_t>& recs, const TokenGrid& grid) {
  const std::size_t cells = grid.minutes * grid.channels;
  std::vector<S> v(recs.size() * cells);
  for (std::size_t b = 0; b < recs.size(); ++b) {
    const auto& r = ds.records.at(recs[b]);
    for (std::size_t k = 0; k < cells; ++k) v[b * cells + k] = r.observed[k] ? static_cast<S>(r.values[k]) : S(0);
  }
  return Tensor<S>::from_data({recs.size(), grid.minutes, grid.channels}, std::move(v));
}

// Linearly imputed input for the impute_input protocol.
template <class S>
Tensor<S> imputed_input(const Dataset& ds, const std::vector<const EvalCase*>& cases, const TokenGrid& grid) {
  const std::size_t T = grid.minutes, C = grid.channels, cells = T * C;
  std::vector<S> v(cases.size() * cells);
  for (std::size_t b = 0; b < cases.size(); ++b) {
    const auto& r = ds.records.at(cases[b]->record);
    std::vector<std::uint8_t> visible = r.observed;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        if (cases[b]->artificial[grid.index(c, t / grid.patch)]) visible[t * C + c] = 0;
    const auto filled = impute_linear(r.values, visible, T, C);
    for (std::size_t k = 0; k < cells; ++k) v[b * cells + k] = static_cast<S>(filled[k]);
  }
  return Tensor<S>::from_data({cases.size(), T, C}, std::move(v));
}

inline void add_case_score(ScoreSummary& s, const EvalCase& ec, const SensorRecord& r,
                           const std::vector<double>& pred, std::size_t trials) {
  if (ec.pixels == 0) {
    ++s.skipped;
    return;
  }
  double se = 0;
  for (std::size_t k = 0; k < ec.scored.size(); ++k)
    if (ec.scored[k]) se += (pred[k] - r.values[k]) * (pred[k] - r.values[k]);
  s.per_case[ec.record * trials + ec.trial] = se / static_cast<double>(ec.pixels);
  s.pixels += ec.pixels;
}

// Reconstructs every case with attention-only masking (inherited and eval
// tokens are mask placeholders, nothing is dropped) and scores masked MSE on
// observed pixels of the eval-masked tokens.
template <class S>
ScoreSummary eval_generative(const ModelParams<S>& m, const Dataset& ds, const EvalTask& task,
                             const EvalOptions& opts) {
  NoGradGuard ng;
  DenormalGuard ftz;
  const TokenGrid grid = m.config.grid();
  const auto cases = build_eval_cases(ds, task, grid, opts);
  const std::size_t cells = grid.minutes * grid.channels;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  ScoreSummary s;
  for (std::size_t lo = 0; lo < cases.size(); lo += bs) {
    const std::size_t hi = std::min(cases.size(), lo + bs);
    std::vector<std::size_t> recs;
    std::vector<const EvalCase*> live;
    std::vector<MaskPlan> plans;
    for (std::size_t i = lo; i < hi; ++i) {
      if (cases[i].pixels == 0) continue;
      recs.push_back(cases[i].record);
      live.push_back(&cases[i]);
      plans.push_back(attention_only_plan(opts.impute_input ? TokenMask(grid.tokens(), 0) : cases[i].inherited,
                                          cases[i].artificial));
    }
    std::size_t b = 0;
    Tensor<S> pred;
    if (!recs.empty()) {
      pred = reconstruct(m, opts.impute_input ? imputed_input<S>(ds, live, grid) : batch_input<S>(ds, recs, grid),
                         plans);
    }
    for (std::size_t i = lo; i < hi; ++i) {
      std::vector<double> p;
      if (cases[i].pixels) {
        auto d = pred.data().subspan(b * cells, cells);
        p.assign(d.begin(), d.end());
        ++b;
      }
      add_case_score(s, cases[i], ds.records[cases[i].record], p, opts.trials);
    }
  }
  finalize_summary(s);
  return s;
}

// Linear interpolation and nearest-neighbour fill cannot recover a channel
// that is hidden for the whole day.
inline bool imputer_applicable(Imputer kind, const EvalTask& task) {
  return !(task.kind == EvalKind::kSignalImp && kind != Imputer::kMean);
}

inline ScoreSummary eval_baseline_imputer(const Dataset& ds, const EvalTask& task, Imputer kind,
                                          const EvalOptions& opts, const TokenGrid& grid) {
  ScoreSummary s;
  if (!imputer_applicable(kind, task)) {
    s.applicable = false;
    return s;
  }
  for (const auto& ec : build_eval_cases(ds, task, grid, opts)) {
    const SensorRecord& r = ds.records[ec.record];
    std::vector<std::uint8_t> visible = r.observed;
    for (std::size_t t = 0; t < grid.minutes; ++t)
      for (std::size_t c = 0; c < grid.channels; ++c)
        if (ec.artificial[grid.index(c, t / grid.patch)]) visible[t * grid.channels + c] = 0;
    add_case_score(s, ec, r, impute(kind, r.values, visible, grid.minutes, grid.channels), opts.trials);
  }
  finalize_summary(s);
  return s;
}

// ---------------------------------------------------------------------------
// Embeddings.

// Pooled embeddings [n, E] for every record. `extra` (optional, one mask per
// record) is OR-ed into the inherited mask before pooling.
template <class S>
Eigen::MatrixXd embed_dataset(const ModelParams<S>& m, const Dataset& ds, double tau = 1.0,
                              const std::vector<TokenMask>* extra = nullptr, std::size_t batch_size = 64) {
  NoGradGuard ng;
  DenormalGuard ftz;
  const TokenGrid grid = m.config.grid();
  const std::size_t E = m.config.embed;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(E));
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t lo = 0; lo < ds.size(); lo += bs) {
    const std::size_t hi = std::min(ds.size(), lo + bs);
    std::vector<std::size_t> recs;
    std::vector<TokenMask> inh;
    for (std::size_t r = lo; r < hi; ++r) {
      recs.push_back(r);
      TokenMask mask = derive_inherited_mask(ds.records[r], grid, tau);
      if (extra) {
        const auto& x = extra->at(r);
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] || x[i];
      }
      inh.push_back(std::move(mask));
    }
    Tensor<S> pooled = pool_embedding(m, batch_input<S>(ds, recs, grid), inh);
    auto d = pooled.data();
    for (std::size_t b = 0; b < recs.size(); ++b)
      for (std::size_t e = 0; e < E; ++e)
        out(static_cast<Eigen::Index>(lo + b), static_cast<Eigen::Index>(e)) = static_cast<double>(d[b * E + e]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics.

enum class ProbeKind { kBinary, kMulticlass, kRegression };

inline std::string_view probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kBinary: return "binary_class";
    case ProbeKind::kMulticlass: return "multiclass";
    case ProbeKind::kRegression: return "regression";
  }
  return "?";
}

inline ProbeKind parse_probe_kind(std::string_view s) {
  if (s == "binary_class") return ProbeKind::kBinary;
  if (s == "multiclass") return ProbeKind::kMulticlass;
  if (s == "regression") return ProbeKind::kRegression;
  throw ConfigError("unknown probe kind '" + std::string(s) + "'");
}

// Missing values (undefined metrics) are std::nullopt.
using MetricMap = std::map<std::string, std::optional<double>>;

// Rank-statistic AUROC of `score` for positives; ties count one half.
inline std::optional<double> auroc_binary(const std::vector<double>& score, const std::vector<int>& positive) {
  const std::size_t n = score.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] < score[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && score[order[j + 1]] == score[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double np = 0, nn = 0, rs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      np += 1;
      rs += rank[i];
    } else {
      nn += 1;
    }
  }
  if (np == 0 || nn == 0) return std::nullopt;
  return (rs - np * (np + 1) / 2) / (np * nn);
}

// probs: [n, K] class probabilities; labels in [0, K).
inline MetricMap classification_metrics(const Eigen::MatrixXd& probs, const std::vector<int>& labels) {
  const auto n = static_cast<std::size_t>(probs.rows());
  const auto K = static_cast<std::size_t>(probs.cols());
  if (n == 0 || n != labels.size()) throw ContractViolation("metrics need one nonempty score row per label");
  if (K < 2) throw ContractViolation("classification needs at least two classes");
  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg;
    probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    pred[i] = static_cast<int>(arg);
  }
  std::vector<double> tp(K, 0), fp(K, 0), fn(K, 0), support(K, 0);
  double correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]), p = static_cast<std::size_t>(pred[i]);
    if (y >= K) throw ContractViolation("label outside the class range");
    support[y] += 1;
    if (y == p) {
      correct += 1;
      tp[y] += 1;
    } else {
      fp[p] += 1;
      fn[y] += 1;
    }
  }
  MetricMap out;
  out["accuracy"] = correct / static_cast<double>(n);
  std::size_t present = 0;
  double recall_sum = 0;
  for (std::size_t k = 0; k < K; ++k)
    if (support[k] > 0) {
      ++present;
      recall_sum += tp[k] / support[k];
    }
  out["balanced_accuracy"] = present >= 2 ? std::optional<double>(recall_sum / static_cast<double>(present))
                                          : std::nullopt;
  auto f1 = [&](std::size_t k) {
    const double d = 2 * tp[k] + fp[k] + fn[k];
    return d > 0 ? 2 * tp[k] / d : 0.0;
  };
  std::vector<double> col(n);
  std::vector<int> pos(n);
  if (K == 2) {
    out["f1"] = f1(1);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = probs(static_cast<Eigen::Index>(i), 1);
      pos[i] = labels[i] == 1;
    }
    out["auroc"] = auroc_binary(col, pos);
  } else {
    // Macro over classes that occur in either labels or predictions.
    double fs = 0;
    std::size_t fk = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (support[k] > 0 || tp[k] + fp[k] > 0) {
        fs += f1(k);
        ++fk;
      }
    out["f1"] = fs / static_cast<double>(fk);
    double as = 0;
    std::size_t ak = 0;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        pos[i] = labels[i] == static_cast<int>(k);
      }
      if (auto a = auroc_binary(col, pos)) {
        as += *a;
        ++ak;
      }
    }
    out["auroc"] = present >= 2 && ak > 0 ? std::optional<double>(as / static_cast<double>(ak)) : std::nullopt;
  }
  return out;
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

inline MetricMap regression_metrics(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.empty() || pred.size() != target.size()) throw ContractViolation("metrics need equal nonempty vectors");
  double ae = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ae += std::abs(pred[i] - target[i]);
  return {{"mae", ae / static_cast<double>(pred.size())}, {"pearson", pearson(pred, target)}};
}

// ---------------------------------------------------------------------------
// Probes.

struct ProbeConfig {
  std::size_t steps = 500;
  double lr = 5e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 512;
  double ridge = 1e-8;
  std::uint64_t seed = 0;
};

// Linear head on z-scored embeddings. Classification heads output softmax
// probabilities [n, K]; regression heads output [n, 1].
struct LinearProbe {
  ProbeKind kind = ProbeKind::kRegression;
  Eigen::RowVectorXd mean, scale;
  Eigen::MatrixXd weight;  // [E, K]
  Eigen::RowVectorXd bias;  // [K]

  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const {
    if (x.cols() != mean.size()) throw DimensionError("probe expects " + std::to_string(mean.size()) + " features");
    return (x.rowwise() - mean).array().rowwise() / scale.array();
  }

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd z = (standardize(x) * weight).rowwise() + bias;
    if (kind == ProbeKind::kRegression) return z;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - mx).exp();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  }
};

inline std::vector<int> class_labels(const std::vector<double>& y) {
  std::vector<int> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] >= 0) || std::floor(y[i]) != y[i]) throw ConfigError("class labels must be non-negative integers");
    out[i] = static_cast<int>(y[i]);
  }
  return out;
}

// classes: number of output classes for classification (>= 2); ignored for
// regression.
inline LinearProbe fit_probe(const Eigen::MatrixXd& x, const std::vector<double>& y, ProbeKind kind,
                             std::size_t classes, const ProbeConfig& cfg = {}) {
  const Eigen::Index n = x.rows(), E = x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) throw ContractViolation("probe needs one label per embedding");
  LinearProbe p;
  p.kind = kind;
  p.mean = x.colwise().mean();
  p.scale = ((x.rowwise() - p.mean).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < E; ++j)
    if (!(p.scale(j) > 1e-12)) p.scale(j) = 1.0;
  const Eigen::MatrixXd z = p.standardize(x);

  if (kind == ProbeKind::kRegression) {
    Eigen::MatrixXd a(n, E + 1);
    a << z, Eigen::VectorXd::Ones(n);
    Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
    Eigen::MatrixXd g = a.transpose() * a;
    g.diagonal().array() += cfg.ridge;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
    Eigen::VectorXd w = ldlt.solve(a.transpose() * t);
    if (ldlt.info() != Eigen::Success || !w.allFinite()) throw NumericError("probe design matrix is singular");
    p.weight = w.head(E);
    p.bias = Eigen::RowVectorXd::Constant(1, w(E));
    return p;
  }

  if (classes < 2) throw ConfigError("classification probe needs at least two classes");
  const auto lab = class_labels(y);
  for (int v : lab)
    if (static_cast<std::size_t>(v) >= classes) throw ConfigError("class label exceeds the class count");
  const auto K = static_cast<Eigen::Index>(classes);
  p.weight = Eigen::MatrixXd::Zero(E, K);
  p.bias = Eigen::RowVectorXd::Zero(K);
  Eigen::MatrixXd mw = p.weight, vw = p.weight;
  Eigen::RowVectorXd mb = p.bias, vb = p.bias;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const auto bs = static_cast<std::size_t>(std::min<Eigen::Index>(n, static_cast<Eigen::Index>(cfg.batch_size)));
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> rows;
    if (bs == static_cast<std::size_t>(n)) {
      rows.resize(bs);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    } else {
      Rng rng = Rng::stream(cfg.seed, "probe", step);
      rows = rng.sample(static_cast<std::size_t>(n), bs);
    }
    Eigen::MatrixXd zb(static_cast<Eigen::Index>(bs), E);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bs), K);
    for (std::size_t i = 0; i < bs; ++i) {
      zb.row(static_cast<Eigen::Index>(i)) = z.row(static_cast<Eigen::Index>(rows[i]));
      onehot(static_cast<Eigen::Index>(i), lab[rows[i]]) = 1.0;
    }
    Eigen::MatrixXd logits = (zb * p.weight).rowwise() + p.bias;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Eigen::MatrixXd d = (logits - onehot) / static_cast<double>(bs);
    const Eigen::MatrixXd gw = zb.transpose() * d;
    const Eigen::RowVectorXd gb = d.colwise().sum();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw.array() + (1 - b2) * gw.array().square();
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb.array() + (1 - b2) * gb.array().square();
    p.weight *= 1.0 - cfg.lr * cfg.weight_decay;
    p.weight.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    p.bias.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }
  if (!p.weight.allFinite()) throw NumericError("probe training diverged");
  return p;
}

inline MetricMap probe_metrics(const LinearProbe& p, const Eigen::MatrixXd& x, const std::vector<double>& y) {
  const Eigen::MatrixXd out = p.predict(x);
  if (p.kind == ProbeKind::kRegression) {
    std::vector<double> pred(out.data(), out.data() + out.rows());
    return regression_metrics(pred, y);
  }
  return classification_metrics(out, class_labels(y));
}

// Accuracy of always predicting the most frequent class of `test`.
inline double majority_accuracy(const std::vector<double>& test) {
  std::map<double, std::size_t> counts;
  for (double v : test) ++counts[v];
  std::size_t best = 0;
  for (const auto& [k, c] : counts) best = std::max(best, c);
  return test.empty() ? 0.0 : static_cast<double>(best) / static_cast<double>(test.size());
}

// Standard error of `metric` (and of its paired difference) under a seeded
// bootstrap over test rows.
inline double bootstrap_stderr(const std::function<std::optional<double>(const std::vector<std::size_t>&)>& metric,
                               std::size_t n, std::size_t reps, std::uint64_t seed) {
  std::vector<double> vals;
  for (std::size_t r = 0; r < reps; ++r) {
    Rng rng = Rng::stream(seed, "bootstrap", r);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.index(n);
    if (auto v = metric(idx)) vals.push_back(*v);
  }
  if (vals.size() < 2) return 0.0;
  return stderr_of(vals) * std::sqrt(static_cast<double>(vals.size()));
}

inline std::vector<double> labels_of(const Dataset& ds, const std::string& name) {
  std::vector<double> y;
  y.reserve(ds.size());
  for (const auto& r : ds.records) {
    auto it = r.labels.find(name);
    if (it == r.labels.end()) throw ConfigError("record " + r.id + " has no label '" + name + "' for the probe task");
    y.push_back(it->second);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Robustness.

struct RobustnessRow {
  std::string condition;  // "baseline", "group:<name>" or "window:<name>"
  bool failed = false;
  std::string reason;
  MetricMap metrics;
  MetricMap delta;          // condition - baseline
  MetricMap delta_stderr;   // paired bootstrap
};

inline std::string condition_name(const EvalTask& t) {
  return (t.kind == EvalKind::kTargetedGroup ? "group:" : "window:") + t.target;
}

inline std::vector<EvalTask> standard_conditions(const ChannelSchema& schema) {
  std::vector<EvalTask> out;
  for (const auto& g : schema.groups) out.push_back({EvalKind::kTargetedGroup, 0, g.name, false});
  for (const auto& w : standard_windows()) out.push_back({EvalKind::kTargetedWindow, 0, w.name, false});
  return out;
}

// Re-pools `test` with each condition's targeted mask added to the inherited
// mask and re-scores the frozen probe. Deltas carry paired bootstrap errors.
template <class S>
std::vector<RobustnessRow> robustness_sweep(const ModelParams<S>& m, const Dataset& test, const LinearProbe& probe,
                                            const std::vector<double>& y, const std::vector<EvalTask>& conditions,
                                            double tau = 1.0, std::size_t bootstrap_reps = 200,
                                            std::uint64_t seed = 0) {
  const TokenGrid grid = m.config.grid();
  const Eigen::MatrixXd base_out = probe.predict(embed_dataset(m, test, tau));
  auto score = [&](const Eigen::MatrixXd& out, const std::vector<std::size_t>* idx) {
    if (!idx) return probe.kind == ProbeKind::kRegression
                         ? regression_metrics(std::vector<double>(out.data(), out.data() + out.rows()), y)
                         : classification_metrics(out, class_labels(y));
    Eigen::MatrixXd o(static_cast<Eigen::Index>(idx->size()), out.cols());
    std::vector<double> yy;
    for (std::size_t i = 0; i < idx->size(); ++i) {
      o.row(static_cast<Eigen::Index>(i)) = out.row(static_cast<Eigen::Index>((*idx)[i]));
      yy.push_back(y[(*idx)[i]]);
    }
    if (probe.kind == ProbeKind::kRegression) {
      return regression_metrics(std::vector<double>(o.data(), o.data() + o.rows()), yy);
    }
    return classification_metrics(o, class_labels(yy));
  };
  std::vector<RobustnessRow> rows;
  rows.push_back({"baseline", false, "", score(base_out, nullptr), {}, {}});
  for (const auto& cond : conditions) {
    RobustnessRow row;
    row.condition = condition_name(cond);
    std::vector<TokenMask> extra;
    for (const auto& r : test.records) {
      TokenMask inh = derive_inherited_mask(r, grid, tau);
      Rng unused(0);
      TokenMask t = build_eval_mask(cond, inh, grid, test.schema, unused);
      bool empty = true;
      for (std::size_t i = 0; i < t.size(); ++i) empty = empty && (inh[i] || t[i]);
      if (empty) {
        row.failed = true;
        row.reason = "record " + r.id + " has no visible tokens";
        break;
      }
      extra.push_back(std::move(t));
    }
    if (!row.failed) {
      const Eigen::MatrixXd out = probe.predict(embed_dataset(m, test, tau, &extra));
      row.metrics = score(out, nullptr);
      for (const auto& [name, v] : row.metrics) {
        const auto& b = rows[0].metrics.at(name);
        if (!v || !b) {
          row.delta[name] = std::nullopt;
          row.delta_stderr[name] = std::nullopt;
          continue;
        }
        row.delta[name] = *v - *b;
        row.delta_stderr[name] = bootstrap_stderr(
            [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
              auto c = score(out, &idx).at(name);
              auto z = score(base_out, &idx).at(name);
              if (!c || !z) return std::nullopt;
              return *c - *z;
            },
            y.size(), bootstrap_reps, seed);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports.

struct ReportRow {
  std::string task;
  std::string param;
  std::string condition;
  std::string metric;
  std::optional<double> value;
  std::optional<double> stderr_;
  std::size_t n = 0;
  std::size_t pixels = 0;  // masked pixels averaged over (generative rows)
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct EvalReport {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ReportRow> rows;

  void add_score(const EvalTask& task, const std::string& condition, const ScoreSummary& s) {
    std::ostringstream param;
    if (task.kind == EvalKind::kTargetedGroup || task.kind == EvalKind::kTargetedWindow) {
      param << task.target;
    } else {
      param << task.param;
    }
    ReportRow r{std::string(eval_kind_name(task.kind)), param.str(), condition, "mse", std::nullopt, std::nullopt,
                s.count, s.pixels};
    if (s.applicable) {
      r.value = s.mean;
      r.stderr_ = s.stderr_;
    }
    rows.push_back(r);
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json j{{"task", r.task},     {"param", r.param}, {"condition", r.condition},
                       {"metric", r.metric}, {"n", r.n},         {"pixels", r.pixels}};
      j["value"] = r.value ? nlohmann::json(*r.value) : nlohmann::json("NA");
      j["stderr"] = r.stderr_ ? nlohmann::json(*r.stderr_) : nlohmann::json("NA");
      arr.push_back(j);
    }
    return {{"meta", meta}, {"results", arr}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "task,param,condition,metric,value,stderr,n\n";
    for (const auto& r : rows) {
      os << r.task << ',' << r.param << ',' << r.condition << ',' << r.metric << ','
         << (r.value ? format_number(*r.value) : "NA") << ',' << (r.stderr_ ? format_number(*r.stderr_) : "NA") << ','
         << r.n << '\n';
    }
    return os.str();
  }

  void write(const std::filesystem::path& dir, const std::string& stem) const {
    std::filesystem::create_directories(dir);
    std::ofstream j(dir / (stem + ".json"), std::ios::trunc);
    j << to_json().dump(2) << '\n';
    std::ofstream c(dir / (stem + ".csv"), std::ios::trunc);
    c << to_csv();
    if (!j || !c) throw Error("cannot write report to " + dir.string());
  }
};

}  // namespace aim
