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

#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "moerepl/random.hpp"
#include "moerepl/selection.hpp"

using namespace moerepl;

namespace {

GateScoreTable table(std::vector<std::vector<double>> s) {
  GateScoreTable t;
  t.scores = std::move(s);
  t.token_count = 1;
  return t;
}

GateScoreTable random_table(RandomSource& rng, std::size_t layers, std::size_t n) {
  GateScoreTable t;
  for (std::size_t j = 0; j < layers; ++j) {
    std::vector<double> v(n);
    double z = 0.0;
    for (auto& x : v) z += (x = std::exp(2.0 * rng.normal()));
    for (auto& x : v) x /= z;
    t.scores.push_back(v);
  }
  t.token_count = 1;
  return t;
}

ThresholdConfig thr(double p, double alpha = 0.3, double delta = 0.2) { return ThresholdConfig{p, alpha, delta}; }

}  // namespace

TEST(AdaptiveThresholds, UnitNormGivesBase) {
  const auto p = adaptive_thresholds(make_router_norm_profile({2.0, 2.0}), thr(0.3));
  EXPECT_EQ(p, (std::vector<double>{0.3, 0.3}));
}

TEST(AdaptiveThresholds, HandValues) {
  RouterNormProfile prof;
  prof.raw_norms = {1.5, 3.0};
  prof.relative_norms = {1.5, 3.0};
  const auto p = adaptive_thresholds(prof, thr(0.3));
  EXPECT_NEAR(p[0], 0.3 * std::exp(-0.15), 1e-15);
  EXPECT_NEAR(p[0], 0.2582, 5e-5);
  EXPECT_NEAR(p[1], 0.24, 1e-15);
}

TEST(AdaptiveThresholds, ClipContainment) {
  RandomSource rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> raw(6);
    for (auto& r : raw) r = 0.05 + rng.uniform() * 3.0;
    const double p = 0.05 + 0.9 * rng.uniform();
    const double delta = rng.uniform() * 0.5;
    const auto out = adaptive_thresholds(make_router_norm_profile(raw), thr(p, 0.3 + rng.uniform(), delta));
    for (double v : out) {
      EXPECT_GE(v, (1.0 - delta) * p - 1e-15);
      EXPECT_LE(v, (1.0 + delta) * p + 1e-15);
    }
  }
}

TEST(AdaptiveThresholds, InvalidBaseRejected) {
  const auto prof = make_router_norm_profile({1.0});
  EXPECT_THROW(adaptive_thresholds(prof, thr(0.0)), ConfigError);
  EXPECT_THROW(adaptive_thresholds(prof, thr(1.0)), ConfigError);
}

TEST(SelectCandidates, HandTrace) {
  const auto plan = select_candidates(table({{0.1, 0.2, 0.3, 0.4}}), {0.25});
  EXPECT_EQ(plan.layers[0].candidate_ids, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(plan.layers[0].cumulative_score, 0.3, 1e-15);
}

TEST(SelectCandidates, ZeroThresholdIsEmpty) {
  EXPECT_TRUE(select_candidates(table({{0.1, 0.2, 0.3, 0.4}}), {0.0}).empty());
}

TEST(SelectCandidates, UniformScoresHalfThreshold) {
  for (std::size_t n : {2u, 3u, 4u, 5u, 8u, 10u, 16u, 17u}) {
    const auto plan = select_candidates(table({std::vector<double>(n, 1.0 / static_cast<double>(n))}), {0.5});
    EXPECT_EQ(plan.layers[0].candidate_ids.size(), (n + 1) / 2) << n;
  }
}

TEST(SelectCandidates, EqualScoresOrderedByIndex) {
  const auto plan = select_candidates(table({{0.3, 0.2, 0.3, 0.2}}), {0.5});
  EXPECT_EQ(plan.layers[0].candidate_ids, (std::vector<std::size_t>{1, 3, 0}));
}

TEST(SelectCandidates, CapLimitsPrefix) {
  const auto plan = select_candidates(table({{0.25, 0.25, 0.25, 0.25}}), {0.99}, 2);
  EXPECT_EQ(plan.layers[0].candidate_ids.size(), 2u);
}

TEST(UniformSelect, HandValues) {
  const auto plan = uniform_select(table({{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}}), 0.3);
  for (const auto& l : plan.layers) EXPECT_EQ(l.candidate_ids.size(), 2u);
  EXPECT_TRUE(uniform_select(table({{0.25, 0.25, 0.25, 0.25}}), 0.0).empty());
}

TEST(AverageSelect, HandValues) {
  const auto t = table({{0.4, 0.1, 0.3, 0.2}});
  EXPECT_EQ(average_select(t, 2).layers[0].candidate_ids, (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(average_select(t, 0).empty());
  EXPECT_EQ(average_select(t, 4).layers[0].candidate_ids.size(), 4u);
  EXPECT_THROW(average_select(t, 5), ContractError);
}

TEST(SelectionProperties, OverRandomTables) {
  RandomSource rng(2024);
  for (int rep = 0; rep < 100; ++rep) {
    const auto t = random_table(rng, 4, 8);
    std::vector<double> lo(4), hi(4);
    for (std::size_t j = 0; j < 4; ++j) {
      lo[j] = rng.uniform() * 0.9;
      hi[j] = std::min(0.99, lo[j] + rng.uniform() * 0.3);
    }
    const auto a = select_candidates(t, lo), b = select_candidates(t, hi);
    for (std::size_t j = 0; j < 4; ++j) {
      const auto& ca = a.layers[j].candidate_ids;
      const auto& cb = b.layers[j].candidate_ids;
      // Monotonicity.
      for (std::size_t i : ca) EXPECT_NE(std::find(cb.begin(), cb.end(), i), cb.end());
      // Distinct, in range, cumulative matches.
      std::vector<std::size_t> s = cb;
      std::sort(s.begin(), s.end());
      EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
      double cum = 0.0;
      for (std::size_t i : cb) {
        EXPECT_LT(i, 8u);
        cum += t.scores[j][i];
      }
      EXPECT_NEAR(cum, b.layers[j].cumulative_score, 1e-12);
      // Crossing: reaches the threshold, and is minimal.
      if (!cb.empty()) {
        EXPECT_GE(cum, hi[j] - 1e-12);
        double top = 0.0;
        for (std::size_t i : cb) top = std::max(top, t.scores[j][i]);
        EXPECT_LT(cum - top, hi[j]);
      }
    }
  }
}

TEST(SelectionProperties, ZeroDeltaMatchesUniform) {
  RandomSource rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const auto t = random_table(rng, 4, 8);
    std::vector<double> raw(4);
    for (auto& r : raw) r = 0.1 + rng.uniform();
    const double p = 0.05 + 0.9 * rng.uniform();
    const auto th = adaptive_thresholds(make_router_norm_profile(raw), thr(p, 0.3, 0.0));
    const auto a = select_candidates(t, th), u = uniform_select(t, p);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(a.layers[j].candidate_ids, u.layers[j].candidate_ids);
  }
}

TEST(SelectionJson, RoundTrip) {
  const auto t = table({{0.1, 0.2, 0.3, 0.4}, {0.4, 0.3, 0.2, 0.1}});
  const auto plan = select_candidates(t, {0.25, 0.5});
  const auto back = plan_from_json(nlohmann::json::parse(plan_to_json(plan).dump()), &t);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(back.layers[j].candidate_ids, plan.layers[j].candidate_ids);
    EXPECT_EQ(back.layers[j].threshold, plan.layers[j].threshold);
    EXPECT_NEAR(back.layers[j].cumulative_score, plan.layers[j].cumulative_score, 1e-15);
  }
}
