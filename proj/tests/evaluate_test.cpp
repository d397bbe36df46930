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

#include "aim/evaluate.hpp"

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"

namespace aim {
namespace {

constexpr double kMiss = 0.0;

std::vector<double> run(Imputer k, std::vector<double> v, std::vector<std::uint8_t> o) {
  return impute(k, v, o, v.size(), 1);
}

TEST(Imputers, DocumentedExamples) {
  EXPECT_EQ(run(Imputer::kLinear, {1, kMiss, 3}, {1, 0, 1}), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(run(Imputer::kLinear, {kMiss, kMiss, 4, kMiss}, {0, 0, 1, 0}), (std::vector<double>{4, 4, 4, 4}));
  EXPECT_EQ(run(Imputer::kNearest, {1, kMiss, kMiss, 5}, {1, 0, 0, 1}), (std::vector<double>{1, 1, 5, 5}));
  EXPECT_EQ(run(Imputer::kNearest, {1, kMiss, 3}, {1, 0, 1}), (std::vector<double>{1, 1, 3}));
  EXPECT_EQ(run(Imputer::kMean, {1, kMiss, 3, kMiss}, {1, 0, 1, 0}), (std::vector<double>{1, 2, 3, 2}));
  for (auto k : {Imputer::kLinear, Imputer::kNearest, Imputer::kMean})
    EXPECT_EQ(run(k, {7, 7, 7}, {0, 0, 0}), (std::vector<double>{0, 0, 0}));
}

TEST(Imputers, CompleteRecordIsUnchanged) {
  Rng rng(2);
  std::vector<double> v(40);
  for (auto& x : v) x = rng.normal();
  std::vector<std::uint8_t> o(40, 1);
  for (auto k : {Imputer::kLinear, Imputer::kNearest, Imputer::kMean}) EXPECT_EQ(impute(k, v, o, 10, 4), v);
}

TEST(Imputers, MatchBruteForceOracles) {
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    auto g = oracle::random_sparse_grid(rng);
    auto check = [&](const std::vector<double>& a, const std::vector<double>& b) {
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-9);
    };
    check(impute_linear(g.values, g.observed, g.T, g.S), oracle::linear(g.values, g.observed, g.T, g.S));
    check(impute_nn(g.values, g.observed, g.T, g.S), oracle::nearest(g.values, g.observed, g.T, g.S));
    check(impute_mean(g.values, g.observed, g.T, g.S), oracle::mean(g.values, g.observed, g.T, g.S));
  }
}

Eigen::MatrixXd two_class_probs(const std::vector<double>& p1) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(p1.size()), 2);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = 1 - p1[i];
    m(static_cast<Eigen::Index>(i), 1) = p1[i];
  }
  return m;
}

TEST(Metrics, DocumentedExamples) {
  auto m = classification_metrics(two_class_probs({0.1, 0.9}), {0, 1});
  EXPECT_EQ(*m["auroc"], 1.0);
  EXPECT_EQ(*m["accuracy"], 1.0);
  auto r = regression_metrics({1, 2, 4}, {1, 2, 4});
  EXPECT_EQ(*r["mae"], 0.0);
  EXPECT_NEAR(*r["pearson"], 1.0, 1e-15);
}

TEST(Metrics, SingleClassLabelsReportMissing) {
  auto m = classification_metrics(two_class_probs({0.2, 0.7, 0.4}), {1, 1, 1});
  EXPECT_FALSE(m["auroc"].has_value());
  EXPECT_FALSE(m["balanced_accuracy"].has_value());
  EXPECT_TRUE(m["accuracy"].has_value());
  EXPECT_FALSE(regression_metrics({1, 1}, {0, 2})["pearson"].has_value());
}

TEST(Metrics, MatchBruteForceOracles) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 2 + rng.index(200), K = 2 + rng.index(3);
    Eigen::MatrixXd probs(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
    std::vector<int> y(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.index(K));
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) {
        // Coarse values force ties.
        probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = std::round(rng.uniform(0.01, 1) * 8) + 1;
        s += probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      }
      probs.row(static_cast<Eigen::Index>(i)) /= s;
      Eigen::Index arg;
      probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      pred[i] = static_cast<int>(arg);
    }
    auto m = classification_metrics(probs, y);
    auto ba = oracle::balanced_accuracy(pred, y);
    ASSERT_EQ(m["balanced_accuracy"].has_value(), ba.has_value());
    if (ba) {
      EXPECT_NEAR(*m["balanced_accuracy"], *ba, 1e-9);
    }
    if (K == 2) {
      EXPECT_NEAR(*m["f1"], oracle::f1_of(pred, y, 1), 1e-9);
      std::vector<double> s(n);
      std::vector<int> pos(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = probs(static_cast<Eigen::Index>(i), 1);
        pos[i] = y[i] == 1;
      }
      auto a = oracle::auroc(s, pos);
      ASSERT_EQ(m["auroc"].has_value(), a.has_value());
      if (a) {
        EXPECT_NEAR(*m["auroc"], *a, 1e-9);
      }
    } else {
      EXPECT_NEAR(*m["f1"], oracle::macro_f1(pred, y), 1e-9);
    }
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = 0.5 * a[i] + rng.normal();
    }
    auto r = regression_metrics(a, b);
    EXPECT_NEAR(*r["pearson"], *oracle::pearson(a, b), 1e-9);
  }
}

TEST(Probe, SeparableToyReachesPerfectAccuracy) {
  Rng rng(1);
  const Eigen::Index n = 200;
  Eigen::MatrixXd x(n, 3);
  std::vector<double> y(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    x(i, 0) = (c ? 2.0 : -2.0) + rng.uniform(-0.5, 0.5);
    x(i, 1) = rng.normal();
    x(i, 2) = rng.normal();
    y[static_cast<std::size_t>(i)] = c;
  }
  auto p = fit_probe(x.topRows(100), std::vector<double>(y.begin(), y.begin() + 100), ProbeKind::kBinary, 2);
  auto m = probe_metrics(p, x.bottomRows(100), std::vector<double>(y.begin() + 100, y.end()));
  EXPECT_EQ(*m["accuracy"], 1.0);
}

TEST(Probe, RegressionOnFirstCoordinate) {
  Rng rng(3);
  Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(300, 5, [&]() { return rng.normal(); });
  std::vector<double> y(300);
  for (int i = 0; i < 300; ++i) y[static_cast<std::size_t>(i)] = x(i, 0);
  auto p = fit_probe(x.topRows(200), std::vector<double>(y.begin(), y.begin() + 200), ProbeKind::kRegression, 0);
  auto m = probe_metrics(p, x.bottomRows(100), std::vector<double>(y.begin() + 200, y.end()));
  EXPECT_GE(*m["pearson"], 0.999);
  EXPECT_LT(*m["mae"], 1e-6);
}

TEST(Probe, RandomLabelsGiveChanceAuroc) {
  Rng rng(8);
  const Eigen::Index n = 1000;
  Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(n, 8, [&]() { return rng.normal(); });
  std::vector<double> y(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(i % 2);
  rng.shuffle(y);
  auto p = fit_probe(x.topRows(500), std::vector<double>(y.begin(), y.begin() + 500), ProbeKind::kBinary, 2);
  auto m = probe_metrics(p, x.bottomRows(500), std::vector<double>(y.begin() + 500, y.end()));
  EXPECT_NEAR(*m["auroc"], 0.5, 0.05);
}

TEST(Probe, DeterministicAndRejectsBadLabels) {
  Rng rng(4);
  Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(700, 4, [&]() { return rng.normal(); });
  std::vector<double> y(700);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(i % 3);
  auto a = fit_probe(x, y, ProbeKind::kMulticlass, 3), b = fit_probe(x, y, ProbeKind::kMulticlass, 3);
  EXPECT_EQ(a.weight, b.weight);
  EXPECT_EQ(a.bias, b.bias);
  y[0] = 0.5;
  EXPECT_THROW(fit_probe(x, y, ProbeKind::kMulticlass, 3), ConfigError);
  y[0] = 3;
  EXPECT_THROW(fit_probe(x, y, ProbeKind::kMulticlass, 3), ConfigError);
}

TEST(Probe, MissingLabelNamesTheTask) {
  auto ds = testing::small_dataset(2, 1);
  ds.records[1].labels.erase(kAmplitudeLabel);
  try {
    labels_of(ds, kAmplitudeLabel);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(kAmplitudeLabel), std::string::npos);
  }
}

TEST(Generative, ZeroModelScoresUnitVariance) {
  auto ds = testing::small_dataset(200, 6);
  auto m = init_model<double>(testing::small_model(), 1);
  std::fill(m.recon_head.weight.mutable_data().begin(), m.recon_head.weight.mutable_data().end(), 0.0);
  std::fill(m.recon_head.bias.mutable_data().begin(), m.recon_head.bias.mutable_data().end(), 0.0);
  EvalTask task{EvalKind::kRandomImp, 0.5, "", false};
  EvalOptions o;
  o.seed = 3;
  auto s = eval_generative(m, ds, task, o);
  EXPECT_EQ(s.count + s.skipped, 200u);
  EXPECT_NEAR(s.mean, 1.0, 0.1);
}

TEST(Generative, BaselinesShareTheModelPixelSet) {
  auto ds = testing::small_dataset(20, 6);
  auto m = init_model<double>(testing::small_model(), 1);
  EvalOptions o;
  o.seed = 11;
  o.trials = 2;
  for (auto task : {EvalTask{EvalKind::kRandomImp, 0.3, "", false}, EvalTask{EvalKind::kTemporalInterp, 10, "", true},
                    EvalTask{EvalKind::kTemporalExtrap, 10, "", true}, EvalTask{EvalKind::kSignalImp, 2, "", false}}) {
    auto a = eval_generative(m, ds, task, o);
    auto b = eval_baseline_imputer(ds, task, Imputer::kMean, o, m.config.grid());
    EXPECT_EQ(a.pixels, b.pixels) << task.label();
    EXPECT_EQ(a.count, b.count);
    ASSERT_EQ(a.per_case.size(), b.per_case.size());
    for (auto ia = a.per_case.begin(), ib = b.per_case.begin(); ia != a.per_case.end(); ++ia, ++ib)
      EXPECT_EQ(ia->first, ib->first);
    auto cases1 = build_eval_cases(ds, task, m.config.grid(), o), cases2 = build_eval_cases(ds, task, m.config.grid(), o);
    for (std::size_t i = 0; i < cases1.size(); ++i) EXPECT_EQ(cases1[i].scored, cases2[i].scored);
  }
}

TEST(Generative, ImputedInputProtocol) {
  auto m = init_model<double>(testing::small_model(), 4);
  EvalTask task{EvalKind::kTemporalInterp, 10, "", true};
  EvalOptions plain, imputed;
  plain.seed = imputed.seed = 8;
  imputed.impute_input = true;
  // Without gaps there is nothing to impute: hidden pixels sit under mask tokens either way.
  auto full = testing::small_dataset(12, 2, false);
  auto a = eval_generative(m, full, task, plain), b = eval_generative(m, full, task, imputed);
  EXPECT_EQ(a.per_case, b.per_case);
  // With gaps the scored set is shared but the inputs differ.
  auto gappy = testing::small_dataset(12, 2);
  auto c = eval_generative(m, gappy, task, plain), d = eval_generative(m, gappy, task, imputed);
  EXPECT_EQ(c.pixels, d.pixels);
  EXPECT_EQ(c.count, d.count);
  EXPECT_NE(c.mean, d.mean);
}

TEST(Generative, SignalImputationMarksInterpolatorsNotApplicable) {
  auto ds = testing::small_dataset(4, 6);
  const auto g = testing::small_model().grid();
  EvalTask task{EvalKind::kSignalImp, 2, "", false};
  EXPECT_FALSE(eval_baseline_imputer(ds, task, Imputer::kLinear, {}, g).applicable);
  EXPECT_FALSE(eval_baseline_imputer(ds, task, Imputer::kNearest, {}, g).applicable);
  EXPECT_TRUE(eval_baseline_imputer(ds, task, Imputer::kMean, {}, g).applicable);
}

TEST(Generative, LinearRecoversARamp) {
  Dataset ds;
  ds.schema = ChannelSchema::proportional(8);
  ds.minutes = 48;
  SensorRecord r;
  r.id = "ramp";
  r.minutes = 48;
  r.channels = 8;
  for (std::size_t t = 0; t < 48; ++t)
    for (std::size_t c = 0; c < 8; ++c) r.values.push_back(0.1 * static_cast<double>(t) - static_cast<double>(c));
  r.observed.assign(48 * 8, 1);
  ds.records.push_back(r);
  EvalTask task{EvalKind::kTemporalInterp, 10, "", true};
  auto s = eval_baseline_imputer(ds, task, Imputer::kLinear, {}, testing::small_model().grid());
  EXPECT_EQ(s.count, 1u);
  EXPECT_NEAR(s.mean, 0.0, 1e-24);
}

TEST(Robustness, EmptyConditionSetIsBaselineOnly) {
  auto ds = testing::small_dataset(30, 2);
  auto m = init_model<double>(testing::small_model(), 1);
  auto x = embed_dataset(m, ds);
  auto y = labels_of(ds, kActivityLabel);
  auto p = fit_probe(x, y, ProbeKind::kMulticlass, 3);
  auto rows = robustness_sweep(m, ds, p, y, {});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].condition, "baseline");
  auto all = robustness_sweep(m, ds, p, y, standard_conditions(ds.schema), 1.0, 20);
  EXPECT_EQ(all.size(), 1 + ds.schema.groups.size() + standard_windows().size());
  for (const auto& r : all) EXPECT_FALSE(r.failed) << r.condition << ": " << r.reason;
}

TEST(Report, CsvHeaderAndNotApplicable) {
  EvalReport rep;
  ScoreSummary s;
  s.applicable = false;
  s.count = 0;
  rep.add_score(EvalTask{EvalKind::kSignalImp, 2, "", false}, "linear", s);
  ScoreSummary t;
  t.mean = 0.25;
  t.stderr_ = 0.5;
  t.count = 7;
  rep.add_score(EvalTask{EvalKind::kRandomImp, 0.5, "", false}, "model", t);
  EXPECT_EQ(rep.to_csv(),
            "task,param,condition,metric,value,stderr,n\n"
            "signal_imp,2,linear,mse,NA,NA,0\n"
            "random_imp,0.5,model,mse,0.25,0.5,7\n");
  EXPECT_EQ(rep.to_json()["results"][0]["value"], "NA");
}

}  // namespace
}  // namespace aim
