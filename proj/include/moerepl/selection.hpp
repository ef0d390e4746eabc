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

#pragma once

// Replacement-candidate selection: per-layer thresholds modulated by relative
// router norm, then the smallest ascending-score prefix whose cumulative score
// reaches the threshold. Uniform and fixed-count baselines included.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <json.hpp>

#include "moerepl/calibration.hpp"
#include "moerepl/errors.hpp"

namespace moerepl {

struct ThresholdConfig {
  double base_threshold = 0.3;
  double alpha = 0.3;
  double max_delta = 0.2;  // +inf disables clipping

  void validate() const {
    if (!(base_threshold > 0.0 && base_threshold < 1.0))
      throw ConfigError("base_threshold must be in (0, 1)");
    if (!(max_delta >= 0.0)) throw ConfigError("max_delta must be >= 0");
    if (std::isfinite(max_delta) && (1.0 - max_delta) * base_threshold < 0.0)
      throw ConfigError("max_delta must not exceed 1");
    if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
  }

  double p_min() const { return std::isfinite(max_delta) ? (1.0 - max_delta) * base_threshold : 0.0; }
  double p_max() const {
    return std::isfinite(max_delta) ? (1.0 + max_delta) * base_threshold : std::numeric_limits<double>::infinity();
  }
};

struct LayerSelection {
  double threshold = 0.0;
  std::vector<std::size_t> candidate_ids;  // ascending importance
  double cumulative_score = 0.0;
};

struct SelectionPlan {
  std::vector<LayerSelection> layers;

  std::size_t total_candidates() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.candidate_ids.size();
    return n;
  }
  bool empty() const { return total_candidates() == 0; }
};

/// p_j = clip(p * exp(-alpha * (norm_j - 1)), p_min, p_max), in double.
inline std::vector<double> adaptive_thresholds(const RouterNormProfile& profile, const ThresholdConfig& cfg) {
  MOEREPL_REQUIRE(!profile.relative_norms.empty(), "norm profile has no layers");
  cfg.validate();
  std::vector<double> out;
  for (double norm : profile.relative_norms) {
    const double p = cfg.base_threshold * std::exp(-cfg.alpha * (norm - 1.0));
    out.push_back(std::clamp(p, cfg.p_min(), cfg.p_max()));
  }
  return out;
}

/// Expert indices sorted by ascending score; equal scores keep index order.
inline std::vector<std::size_t> ascending_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

/// Cumulative sums within this slack of the threshold count as reaching it,
/// so e.g. five scores of 0.1 reach 0.5.
inline constexpr double kCumulativeSlack = 1e-12;

/// Per layer: the smallest ascending prefix with cumulative score >= the
/// layer threshold, crossing expert included. `max_candidates` caps the
/// prefix length (the pipeline uses N - top_k).
inline SelectionPlan select_candidates(const GateScoreTable& scores, const std::vector<double>& thresholds,
                                       std::optional<std::size_t> max_candidates = std::nullopt) {
  MOEREPL_REQUIRE(thresholds.size() == scores.scores.size(), "one threshold per layer required");
  SelectionPlan plan;
  for (std::size_t j = 0; j < thresholds.size(); ++j) {
    const double thr = thresholds[j];
    MOEREPL_REQUIRE(thr >= 0.0 && !std::isnan(thr), "thresholds must be >= 0");
    const auto& s = scores.scores[j];
    const std::size_t cap = std::min(s.size(), max_candidates.value_or(s.size()));
    LayerSelection sel;
    sel.threshold = thr;
    double cum = 0.0;
    for (std::size_t i : ascending_order(s)) {
      if (cum >= thr - kCumulativeSlack) break;
      if (sel.candidate_ids.size() >= cap) break;
      sel.candidate_ids.push_back(i);
      cum += s[i];
    }
    sel.cumulative_score = cum;
    plan.layers.push_back(std::move(sel));
  }
  return plan;
}

inline SelectionPlan uniform_select(const GateScoreTable& scores, double base_threshold,
                                    std::optional<std::size_t> max_candidates = std::nullopt) {
  return select_candidates(scores, std::vector<double>(scores.scores.size(), base_threshold), max_candidates);
}

/// The `count_per_layer` lowest-score experts of every layer.
inline SelectionPlan average_select(const GateScoreTable& scores, std::size_t count_per_layer) {
  SelectionPlan plan;
  for (const auto& s : scores.scores) {
    if (count_per_layer > s.size())
      throw ContractError("average_select: count " + std::to_string(count_per_layer) + " exceeds expert count");
    LayerSelection sel;
    const auto order = ascending_order(s);
    for (std::size_t k = 0; k < count_per_layer; ++k) {
      sel.candidate_ids.push_back(order[k]);
      sel.cumulative_score += s[order[k]];
    }
    sel.threshold = sel.cumulative_score;
    plan.layers.push_back(std::move(sel));
  }
  return plan;
}

/// round(mean per-layer candidate count) of `plan`.
inline std::size_t mean_candidate_count(const SelectionPlan& plan) {
  if (plan.layers.empty()) return 0;
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(plan.total_candidates()) / static_cast<double>(plan.layers.size())));
}

inline nlohmann::json plan_to_json(const SelectionPlan& plan) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : plan.layers)
    layers.push_back({{"threshold", l.threshold}, {"candidates", l.candidate_ids}});
  return {{"layers", layers}};
}

inline SelectionPlan plan_from_json(const nlohmann::json& j, const GateScoreTable* scores = nullptr) {
  try {
    SelectionPlan plan;
    for (std::size_t k = 0; k < j.at("layers").size(); ++k) {
      const auto& l = j.at("layers")[k];
      LayerSelection sel;
      sel.threshold = l.at("threshold").get<double>();
      sel.candidate_ids = l.at("candidates").get<std::vector<std::size_t>>();
      if (scores) {
        for (std::size_t i : sel.candidate_ids) sel.cumulative_score += scores->scores.at(k).at(i);
      }
      plan.layers.push_back(std::move(sel));
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed selection document: ") + e.what());
  }
}

}  // namespace moerepl
