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

#include "aim/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fd_check.hpp"

namespace aim {
namespace {

using testing::fd_check;
using testing::probe;
using testing::random_tensor;
using T = Tensor<double>;

constexpr double kFdTol = 1e-4;

std::vector<double> vals(const T& t) { return {t.data().begin(), t.data().end()}; }

TEST(Elementwise, AddAndGeluAtZero) {
  T a = T::from_data({2}, {1, 2}), b = T::from_data({2}, {3, 4});
  EXPECT_EQ(vals(elementwise(ElementwiseKind::kAdd, a, b)), (std::vector<double>{4, 6}));
  EXPECT_EQ(gelu(T::from_data({1}, {0.0})).item(), 0.0);
}

TEST(Elementwise, MulGradientAtTwoThree) {
  T a = T::from_data({1}, {2.0}), b = T::from_data({1}, {3.0});
  auto r = fd_check([&] { return sum(mul(a, b)); }, {a, b});
  EXPECT_LT(r.max_abs, 1e-6);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  T a = T::zeros({2, 3}), b = T::zeros({2, 2});
  try {
    add(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, LeadingAxisBroadcastSumsGradient) {
  T a = T::from_data({2, 2}, {1, 2, 3, 4}, true), b = T::from_data({2}, {10, 20}, true);
  EXPECT_EQ(vals(add(a, b)), (std::vector<double>{11, 22, 13, 24}));
  backward(sum(add(a, b)));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{2, 2}));
}

TEST(Elementwise, EveryKindPassesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    T a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), bb = random_tensor({4}, rng);
    T w = random_tensor({3, 4}, rng);
    for (auto kind : {ElementwiseKind::kAdd, ElementwiseKind::kSub, ElementwiseKind::kMul}) {
      EXPECT_LT(fd_check([&] { return probe(elementwise(kind, a, b), w); }, {a, b}).max_rel, kFdTol);
      EXPECT_LT(fd_check([&] { return probe(elementwise(kind, a, bb), w); }, {a, bb}).max_rel, kFdTol);
    }
    for (auto kind : {ElementwiseKind::kScale, ElementwiseKind::kGelu, ElementwiseKind::kTanh,
                      ElementwiseKind::kSquare}) {
      auto r = fd_check([&] { return probe(elementwise<double>(kind, a, std::nullopt, 0.7), w); }, {a});
      EXPECT_LT(r.max_rel, kFdTol) << r.worst;
    }
    EXPECT_LT(fd_check([&] { return mean(square(a)); }, {a}).max_rel, kFdTol);
    EXPECT_LT(fd_check([&] { return probe(reshape(a, {4, 3}), reshape(w, {4, 3})); }, {a}).max_rel, kFdTol);
  }
}

TEST(Elementwise, GeluMatchesTanhFormula) {
  Rng rng(3);
  T x = random_tensor({50}, rng, 3.0);
  T y = gelu(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double ref = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y[i], ref, 1e-12);
  }
}

TEST(Matmul, IdentityAndArithmetic) {
  T id = T::from_data({2, 2}, {1, 0, 0, 1}), m = T::from_data({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(vals(matmul(id, m)), (std::vector<double>{5, 6, 7, 8}));
  EXPECT_EQ(vals(matmul(T::from_data({1, 2}, {1, 2}), T::from_data({2, 1}, {3, 4}))), std::vector<double>{11});
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(T::zeros({2, 3}), T::zeros({2, 3})), DimensionError);
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  T a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), w = random_tensor({3, 2}, rng);
  EXPECT_LT(fd_check([&] { return probe(matmul(a, b), w); }, {a, b}).max_abs, 1e-6);

  T a3 = random_tensor({2, 3, 4}, rng), w3 = random_tensor({2, 3, 2}, rng);
  EXPECT_LT(fd_check([&] { return probe(matmul(a3, b), w3); }, {a3, b}).max_rel, kFdTol);
  T b3 = random_tensor({2, 4, 2}, rng);
  EXPECT_LT(fd_check([&] { return probe(matmul(a3, b3), w3); }, {a3, b3}).max_rel, kFdTol);
  T bt = random_tensor({2, 5, 4}, rng), wt = random_tensor({2, 3, 5}, rng);
  EXPECT_LT(fd_check([&] { return probe(matmul(a3, bt, true), wt); }, {a3, bt}).max_rel, kFdTol);
}

TEST(Matmul, TransposedMatchesExplicit) {
  Rng rng(6);
  T a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
  std::vector<double> bt(20);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) bt[j * 5 + i] = b[i * 4 + j];
  auto x = vals(matmul(a, b, true)), y = vals(matmul(a, T::from_data({4, 5}, bt)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
}

TEST(Softmax, UniformAndMasked) {
  auto u = softmax_lastdim(T::zeros({3}));
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto m = softmax_lastdim(T::zeros({2}), T::from_data({2}, {0.0, kMaskNegative}));
  EXPECT_NEAR(m[0], 1.0, 1e-15);
  EXPECT_LE(m[1], 1e-30);
}

TEST(Softmax, RowsSumToOneAndGradientsMatch) {
  Rng rng(7);
  T x = random_tensor({5}, rng), w = random_tensor({5}, rng);
  auto y = softmax_lastdim(x);
  double s = 0;
  for (double v : y.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_LT(fd_check([&] { return probe(softmax_lastdim(x), w); }, {x}).max_abs, 1e-6);

  T x4 = random_tensor({2, 3, 4, 4}, rng), w4 = random_tensor({2, 3, 4, 4}, rng);
  std::vector<double> mk(8, 0.0);
  mk[1] = mk[6] = mk[7] = kMaskNegative;
  T mask = T::from_data({2, 1, 1, 4}, mk);
  auto r = fd_check([&] { return probe(softmax_lastdim(x4, mask), w4); }, {x4});
  EXPECT_LT(r.max_rel, kFdTol) << r.worst;
  auto y4 = softmax_lastdim(x4, mask);
  for (std::size_t row = 0; row < 24; ++row) {
    const std::size_t b = row / 12;
    double tot = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      tot += y4[row * 4 + j];
      if (mk[b * 4 + j] != 0.0) {
        EXPECT_LE(y4[row * 4 + j], 1e-30);
      }
    }
    EXPECT_NEAR(tot, 1.0, 1e-12);
  }
}

TEST(Softmax, MaskedEntriesDoNotReachWeightedSums) {
  Rng rng(8);
  T x = random_tensor({1, 6}, rng), v = random_tensor({6, 3}, rng);
  T mask = T::from_data({6}, {0, 0, kMaskNegative, 0, kMaskNegative, 0});
  auto base = vals(matmul(softmax_lastdim(x, mask), v));
  v.mutable_data()[2 * 3 + 1] += 1e6;
  v.mutable_data()[4 * 3 + 0] -= 1e6;
  auto moved = vals(matmul(softmax_lastdim(x, mask), v));
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_LT(std::abs(base[i] - moved[i]), 1e-12);
}

TEST(LayerNorm, ConstantAndUnitRows) {
  T g = T::full({3}, 1.0), b = T::zeros({3});
  T c = layer_norm(T::full({1, 3}, 4.0), g, b);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  auto y = layer_norm(T::from_data({1, 2}, {1, -1}), T::full({2}, 1.0), T::zeros({2}));
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, NormalizesRowsAndMatchesFiniteDifferences) {
  Rng rng(9);
  T x = random_tensor({2, 8}, rng, 2.0), g = random_tensor({8}, rng), b = random_tensor({8}, rng);
  auto y = layer_norm(x, T::full({8}, 1.0), T::zeros({8}), 1e-14);
  for (int r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < 8; ++j) m += y[r * 8 + j] / 8;
    for (int j = 0; j < 8; ++j) v += (y[r * 8 + j] - m) * (y[r * 8 + j] - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-10);
  }
  T w = random_tensor({2, 8}, rng);
  auto r = fd_check([&] { return probe(layer_norm(x, g, b), w); }, {x, g, b});
  EXPECT_LT(r.max_abs, 1e-5);
  EXPECT_LT(r.max_rel, kFdTol) << r.worst;
  EXPECT_THROW(layer_norm(x, T::full({7}, 1.0), b), DimensionError);
}

TEST(GatherScatter, SelectionAndRoundtrip) {
  T x = T::from_data({3, 2}, {1, 1, 2, 2, 3, 3});
  EXPECT_EQ(vals(gather_rows(x, RowIndex{2, 0})), (std::vector<double>{3, 3, 1, 1}));
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    T m = random_tensor({7, 3}, rng);
    auto idx = rng.sample(7, 1 + rng.index(7));
    EXPECT_EQ(vals(scatter_rows(gather_rows(m, idx), idx, m)), vals(m));
    // Complementary fill: scatter the rest into a zero base.
    RowIndex rest;
    for (std::size_t i = 0; i < 7; ++i)
      if (std::find(idx.begin(), idx.end(), i) == idx.end()) rest.push_back(i);
    T part = scatter_rows(gather_rows(m, idx), idx, T::zeros({7, 3}));
    T whole = rest.empty() ? part : scatter_rows(gather_rows(m, rest), rest, part);
    EXPECT_EQ(vals(whole), vals(m));
  }
}

TEST(GatherScatter, GradientIsOneHot) {
  T x = T::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(gather_rows(x, RowIndex{1})));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1, 1, 0, 0}));
  x.zero_grad();
  auto r = fd_check([&] { return sum(gather_rows(x, RowIndex{1})); }, {x});
  EXPECT_LT(r.max_abs, 1e-9);
}

TEST(GatherScatter, ErrorsOnBadIndices) {
  T x = T::zeros({3, 2});
  EXPECT_THROW(gather_rows(x, RowIndex{3}), IndexError);
  EXPECT_THROW(scatter_rows(T::zeros({2, 2}), RowIndex{1, 1}, x), ContractViolation);
  EXPECT_THROW(scatter_rows(T::zeros({1, 2}), RowIndex{5}, x), IndexError);
  EXPECT_THROW(gather_rows(T::zeros({2, 3, 2}), BatchRowIndex{{0}, {3}}), IndexError);
}

TEST(GatherScatter, BatchedAndFillFiniteDifferences) {
  Rng rng(12);
  T x = random_tensor({2, 5, 3}, rng), base = random_tensor({2, 5, 3}, rng), row = random_tensor({3}, rng);
  BatchRowIndex idx{{4, 0, 2}, {1, 3, 0}};
  T w = random_tensor({2, 3, 3}, rng), wf = random_tensor({2, 5, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(gather_rows(x, idx), w); }, {x}).max_rel, kFdTol);
  T shared = random_tensor({5, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(gather_rows(shared, idx), w); }, {shared}).max_rel, kFdTol);
  T vals3 = random_tensor({2, 3, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(scatter_rows(vals3, idx, base), wf); }, {vals3, base}).max_rel, kFdTol);
  RowMask fm{1, 0, 0, 1, 0, 0, 1, 1, 0, 0};
  EXPECT_LT(fd_check([&] { return probe(fill_rows(x, row, fm), wf); }, {x, row}).max_rel, kFdTol);
  RowMask inc{1, 1, 0, 0, 1, 0, 0, 0, 1, 0};
  T wm = random_tensor({2, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(masked_mean_rows(x, inc), wm); }, {x}).max_rel, kFdTol);
  EXPECT_THROW(masked_mean_rows(x, RowMask(10, 0)), ContractViolation);
  T unbatched = random_tensor({5, 3}, rng), w2 = random_tensor({5, 3}, rng), v2 = random_tensor({2, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(scatter_rows(v2, RowIndex{3, 1}, unbatched), w2); }, {v2, unbatched}).max_rel,
            kFdTol);
}

TEST(Layout, HeadsAndPatchesRoundtripAndDifferentiate) {
  Rng rng(13);
  T x = random_tensor({2, 3, 8}, rng);
  EXPECT_EQ(vals(merge_heads(split_heads(x, 4))), vals(x));
  T w = random_tensor({2, 4, 3, 2}, rng);
  EXPECT_LT(fd_check([&] { return probe(split_heads(x, 4), w); }, {x}).max_rel, kFdTol);

  T img = random_tensor({2, 12, 3}, rng);
  T p = patchify(img, 4);
  ASSERT_EQ(p.shape(), (Shape{2, 9, 4}));
  // token n = c * slots + k holds minutes k*P..k*P+P-1 of channel c
  EXPECT_EQ(p[((1 * 9) + 2 * 3 + 1) * 4 + 3], img[(1 * 12 + 1 * 4 + 3) * 3 + 2]);
  EXPECT_EQ(vals(unpatchify(p, 12, 3)), vals(img));
  T wp = random_tensor({2, 9, 4}, rng), wu = random_tensor({2, 12, 3}, rng);
  EXPECT_LT(fd_check([&] { return probe(patchify(img, 4), wp); }, {img}).max_rel, kFdTol);
  EXPECT_LT(fd_check([&] { return probe(unpatchify(p, 12, 3), wu); }, {p}).max_rel, kFdTol);
}

TEST(Backward, AnalyticGradients) {
  T x = T::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  T y = T::from_data({2}, {1, 2}, true);
  backward(sum(square(y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, RejectsNonScalarAndSecondCall) {
  T x = T::from_data({2}, {1, 2}, true);
  EXPECT_THROW(backward(square(x)), ContractViolation);
  T loss = sum(square(x));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractViolation);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(14);
  T x = random_tensor({4, 5}, rng), w1 = random_tensor({5, 6}, rng, 0.5), b1 = random_tensor({6}, rng);
  T w2 = random_tensor({6, 3}, rng, 0.5), b2 = random_tensor({3}, rng), target = random_tensor({4, 3}, rng);
  auto loss = [&] { return mean(square(sub(add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2), target))); };
  auto r = fd_check(loss, {w1, b1, w2, b2});
  EXPECT_LT(r.max_rel, kFdTol) << r.worst;
}

TEST(Backward, DeterministicAndTopologicallyOrdered) {
  auto run = [](std::vector<double>& grads) {
    Rng rng(15);
    T a = random_tensor({3, 4}, rng), b = random_tensor({4, 4}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    T h = gelu(matmul(a, b));
    T loss = sum(mul(h, softmax_lastdim(h)));
    auto trace = backward(loss);
    grads.assign(a.grad().begin(), a.grad().end());
    grads.insert(grads.end(), b.grad().begin(), b.grad().end());
    return trace;
  };
  std::vector<double> g1, g2;
  auto trace = run(g1);
  run(g2);
  EXPECT_EQ(g1, g2);
  std::set<std::uint64_t> visited;
  for (const auto& e : trace.entries) {
    EXPECT_TRUE(visited.insert(e.seq).second) << "node visited twice";
    for (auto p : e.parent_seqs) EXPECT_LT(p, e.seq);
  }
  // Children are processed before their parents.
  for (std::size_t i = 1; i < trace.entries.size(); ++i) EXPECT_GT(trace.entries[i - 1].seq, trace.entries[i].seq);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  T x = T::from_data({2}, {1, 2}, true);
  NoGradGuard ng;
  T y = sum(square(x));
  EXPECT_FALSE(y.requires_grad());
}

}  // namespace
}  // namespace aim
