/* Copyright 2026 The moerepl Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "moerepl/autodiff.hpp"
#include "moerepl/grad_check.hpp"
#include "moerepl/matrix.hpp"
#include "moerepl/optimizer.hpp"
#include "moerepl/parameters.hpp"
#include "moerepl/random.hpp"

using namespace moerepl;

TEST(Matrix, IdentityTimesMatrixIsMatrix) {
  RandomSource rng(7);
  const auto m = rng.normal_matrix<double>(3, 4, 1.0);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), m), m);
}

TEST(Matrix, HandProduct) {
  const Matrix<double> a{{1, 2}, {3, 4}};
  const Matrix<double> b{{0}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix<double>{{2}, {4}}));
}

TEST(Matrix, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), ContractError);
}

TEST(Matrix, MatmulIsBitReproducible) {
  RandomSource rng(11);
  const auto a = rng.normal_matrix<float>(17, 23, 1.0);
  const auto b = rng.normal_matrix<float>(23, 9, 1.0);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Matrix, TransposedProductsAgreeWithExplicitTranspose) {
  RandomSource rng(3);
  const auto a = rng.normal_matrix<double>(5, 4, 1.0);
  const auto b = rng.normal_matrix<double>(5, 3, 1.0);
  const auto c = rng.normal_matrix<double>(6, 4, 1.0);
  EXPECT_LT(max_abs_diff(matmul_tn(a, b), matmul(transpose(a), b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_nt(a, c), matmul(a, transpose(c))), 1e-12);
}

TEST(Matrix, SizedConstructorRejectsZeroDimensions) {
  EXPECT_THROW(Matrix<double>(0, 3), ContractError);
  EXPECT_THROW(Matrix<double>(2, 0), ContractError);
}

TEST(Softmax, EqualValuesGiveUniformRow) {
  const Matrix<double> m(1, 5, 2.5);
  const auto s = softmax_rows(m);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Softmax, HandValues) {
  const Matrix<double> m{{0.0, std::log(3.0)}};
  const auto s = softmax_rows(m);
  EXPECT_NEAR(s(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.75, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto s = softmax_rows(Matrix<double>{{1000.0, 0.0}});
  EXPECT_TRUE(all_finite(s));
  EXPECT_NEAR(s(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-15);
}

TEST(Softmax, RejectsNaN) {
  EXPECT_THROW(softmax_rows(Matrix<double>{{0.0, std::nan("")}}), NumericError);
}

TEST(Softmax, RowsSumToOneOverRandomRows) {
  RandomSource rng(99);
  const auto d = rng.normal_matrix<double>(1000, 16, 5.0);
  const auto f = d.cast<float>();
  const auto sd = softmax_rows(d);
  const auto sf = softmax_rows(f);
  for (std::size_t i = 0; i < 1000; ++i) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      a += sd(i, j);
      b += sf(i, j);
    }
    EXPECT_NEAR(a, 1.0, 1e-12);
    EXPECT_NEAR(b, 1.0, 1e-6);
  }
}

TEST(Random, SameSeedSameSequence) {
  RandomSource a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Random, KnownSplitMixValue) {
  // First output of the reference SplitMix64 generator seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(Random, NormalMoments) {
  RandomSource rng(5);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Random, BelowStaysInRange) {
  RandomSource rng(1);
  for (int i = 0; i < 10000; ++i) EXPECT_LT(rng.below(7), 7u);
}

TEST(Backward, SumGivesOnes) {
  ad::Tape<double> tape;
  auto w = tape.parameter("w", Matrix<double>{{1, 2}, {3, 4}}, true);
  const auto g = tape.backward(ad::sum(w));
  EXPECT_EQ(g.at("w"), Matrix<double>(2, 2, 1.0));
}

TEST(Backward, HalfSquaredNormGivesW) {
  const Matrix<double> w0{{1, -2}, {0.5, 4}};
  ad::Tape<double> tape;
  auto w = tape.parameter("w", w0, true);
  const auto g = tape.backward(ad::scale(ad::sum(ad::hadamard(w, w)), 0.5));
  EXPECT_LT(max_abs_diff(g.at("w"), w0), 1e-15);
}

TEST(Backward, FrozenParametersGetNoEntry) {
  ad::Tape<double> tape;
  auto w = tape.parameter("w", Matrix<double>(2, 2, 1.0), true);
  auto f = tape.parameter("frozen", Matrix<double>(2, 2, 3.0), false);
  const auto g = tape.backward(ad::sum(ad::matmul(w, f)));
  EXPECT_TRUE(g.contains("w"));
  EXPECT_FALSE(g.contains("frozen"));
}

TEST(Backward, NonScalarLossThrows) {
  ad::Tape<double> tape;
  auto w = tape.parameter("w", Matrix<double>(2, 2, 1.0), true);
  EXPECT_THROW(tape.backward(w), ContractError);
}

TEST(Backward, MaskedSoftmaxGradientIsZeroOutsideActiveSet) {
  ad::Tape<double> tape;
  auto l = tape.parameter("l", Matrix<double>{{0.1, 0.9, -0.3, 0.4}}, true);
  auto g = ad::masked_softmax_rows(l, {{1, 3}});
  EXPECT_EQ(g.value()(0, 0), 0.0);
  EXPECT_NEAR(g.value()(0, 1) + g.value()(0, 3), 1.0, 1e-15);
  auto target = tape.constant(Matrix<double>{{0.0, 2.0, 0.0, -1.0}});
  const auto grads = tape.backward(ad::sum(ad::hadamard(g, target)));
  EXPECT_EQ(grads.at("l")(0, 0), 0.0);
  EXPECT_EQ(grads.at("l")(0, 2), 0.0);
  EXPECT_NE(grads.at("l")(0, 1), 0.0);
}

namespace {

ParameterBag<double> linear_bag() {
  RandomSource rng(17);
  ParameterBag<double> bag;
  bag.add("w", rng.normal_matrix<double>(4, 3, 1.0), ParamClass::expert);
  return bag;
}

}  // namespace

TEST(GradCheck, LinearModelIsExact) {
  auto bag = linear_bag();
  RandomSource rng(2);
  const auto x = rng.normal_matrix<double>(5, 4, 1.0);
  auto loss = [&](ad::Tape<double>& t, const ParameterBag<double>& p, const TrainableMask& mask) {
    auto w = t.parameter("w", p.get("w"), mask.contains("w"));
    return ad::sum(ad::matmul(t.constant(x), w));
  };
  for (double h : {1e-2, 1e-3, 1e-4, 1e-5}) {
    GradCheckOptions o;
    o.h = h;
    o.probes = 12;
    EXPECT_LE(grad_check(bag, mask_all(bag), loss, o).max_relative_error, 1e-10) << "h=" << h;
  }
}

TEST(GradCheck, ZeroProbesIsAPreconditionError) {
  auto bag = linear_bag();
  GradCheckOptions o;
  o.probes = 0;
  auto loss = [](ad::Tape<double>& t, const ParameterBag<double>& p, const TrainableMask&) {
    return ad::sum(t.parameter("w", p.get("w"), true));
  };
  EXPECT_THROW(grad_check(bag, mask_all(bag), loss, o), ContractError);
}

TEST(GradCheck, CrossEntropyAndSiluChain) {
  RandomSource rng(8);
  ParameterBag<double> bag;
  bag.add("w1", rng.normal_matrix<double>(3, 5, 0.7), ParamClass::expert);
  bag.add("w2", rng.normal_matrix<double>(5, 4, 0.7), ParamClass::router);
  const auto x = rng.normal_matrix<double>(6, 3, 1.0);
  const std::vector<int> labels{0, 3, 1, 2, 2, 0};
  auto loss = [&](ad::Tape<double>& t, const ParameterBag<double>& p, const TrainableMask& m) {
    auto w1 = t.parameter("w1", p.get("w1"), m.contains("w1"));
    auto w2 = t.parameter("w2", p.get("w2"), m.contains("w2"));
    return ad::cross_entropy_loss(ad::matmul(ad::silu(ad::matmul(t.constant(x), w1)), w2), labels);
  };
  const auto rep = grad_check(bag, mask_all(bag), loss);
  EXPECT_LT(rep.max_relative_error, 1e-6) << rep.worst_parameter_id;
  EXPECT_EQ(rep.probes_per_class.size(), 2u);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterBag<double> bag;
  bag.add("w", Matrix<double>{{1.0, -1.0}}, ParamClass::expert);
  AdamW<double> opt(AdamWConfig{0.1});
  ad::GradientMap<double> g;
  g["w"] = Matrix<double>{{2.0, -0.5}};
  opt.step(bag, g, mask_all(bag));
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(bag.get("w")(0, 0), 0.9, 1e-7);
  EXPECT_NEAR(bag.get("w")(0, 1), -0.9, 1e-7);
}

TEST(AdamW, DecoupledWeightDecayWithZeroGradient) {
  ParameterBag<double> bag;
  bag.add("w", Matrix<double>{{2.0}}, ParamClass::expert);
  AdamW<double> opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.5});
  ad::GradientMap<double> g;
  g["w"] = Matrix<double>{{0.0}};
  opt.step(bag, g, mask_all(bag));
  EXPECT_NEAR(bag.get("w")(0, 0), 2.0 - 0.1 * 0.5 * 2.0, 1e-12);
}

TEST(AdamW, UnmaskedParametersUntouched) {
  ParameterBag<double> bag;
  bag.add("a", Matrix<double>{{1.0}}, ParamClass::expert);
  bag.add("b", Matrix<double>{{1.0}}, ParamClass::expert);
  AdamW<double> opt(AdamWConfig{0.1});
  ad::GradientMap<double> g;
  g["a"] = Matrix<double>{{1.0}};
  g["b"] = Matrix<double>{{1.0}};
  opt.step(bag, g, TrainableMask{"a"});
  EXPECT_NE(bag.get("a")(0, 0), 1.0);
  EXPECT_EQ(bag.get("b")(0, 0), 1.0);
}
