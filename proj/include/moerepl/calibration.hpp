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

// Expert importance from calibration data: normalized gate scores per layer
// and per-layer mean router output norms.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/errors.hpp"
#include "moerepl/model.hpp"
#include "moerepl/tasks.hpp"

namespace moerepl {

template <std::floating_point T>
struct CalibrationSet {
  std::vector<Matrix<T>> batches;  // tokens x input_dim each
  std::size_t token_count = 0;

  void validate() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.rows();
    MOEREPL_REQUIRE(n == token_count, "calibration token_count does not match batches");
  }
};

/// Calibration batches start at this train-split batch index so they never
/// coincide with pretraining batches.
inline constexpr std::uint64_t kCalibrationStream = 1ULL << 40;

/// Draws `tokens` training tokens in batches of at most `batch_tokens`,
/// starting at train batch `first_batch`.
template <std::floating_point T>
CalibrationSet<T> make_calibration_set(const SyntheticTask& task, std::size_t tokens, std::size_t batch_tokens,
                                       std::uint64_t first_batch = kCalibrationStream) {
  MOEREPL_REQUIRE(tokens > 0 && batch_tokens > 0, "calibration budget must be positive");
  CalibrationSet<T> set;
  std::uint64_t index = first_batch;
  while (set.token_count < tokens) {
    const std::size_t n = std::min(batch_tokens, tokens - set.token_count);
    set.batches.push_back(task.generate<T>(Split::train, index++, n).inputs);
    set.token_count += n;
  }
  return set;
}

enum class ScoreMode { post_topk, dense };
enum class NormMode { gate_probs, logits };

inline ScoreMode score_mode_from_string(const std::string& s) {
  if (s == "post_topk") return ScoreMode::post_topk;
  if (s == "dense") return ScoreMode::dense;
  throw ConfigError("unknown score mode '" + s + "'");
}
inline const char* to_string(ScoreMode m) { return m == ScoreMode::post_topk ? "post_topk" : "dense"; }

inline NormMode norm_mode_from_string(const std::string& s) {
  if (s == "gate_probs") return NormMode::gate_probs;
  if (s == "logits") return NormMode::logits;
  throw ConfigError("unknown norm mode '" + s + "'");
}
inline const char* to_string(NormMode m) { return m == NormMode::gate_probs ? "gate_probs" : "logits"; }

struct GateScoreTable {
  std::vector<std::vector<double>> scores;  // [layer][expert], each layer sums to 1
  std::size_t token_count = 0;

  std::size_t num_layers() const noexcept { return scores.size(); }
};

struct RouterNormProfile {
  std::vector<double> raw_norms;
  std::vector<double> relative_norms;  // raw / mean(raw)
};

inline RouterNormProfile make_router_norm_profile(std::vector<double> raw) {
  MOEREPL_REQUIRE(!raw.empty(), "router norm profile needs at least one layer");
  double mean = 0.0;
  for (double r : raw) {
    MOEREPL_REQUIRE(r > 0.0 && std::isfinite(r), "router norms must be positive");
    mean += r;
  }
  mean /= static_cast<double>(raw.size());
  RouterNormProfile p;
  for (double r : raw) p.relative_norms.push_back(r / mean);
  p.raw_norms = std::move(raw);
  return p;
}

struct CalibrationResult {
  GateScoreTable scores;
  RouterNormProfile norms;
};

/// One pass over the calibration set producing both gate scores and router
/// norms. Accumulation is in double, in token order.
template <std::floating_point T>
CalibrationResult calibrate(const MoEModel<T>& model, const CalibrationSet<T>& calib,
                            ScoreMode score_mode = ScoreMode::post_topk, NormMode norm_mode = NormMode::gate_probs) {
  if (calib.token_count == 0 || calib.batches.empty())
    throw ContractError("calibration set is empty");
  calib.validate();
  const std::size_t layers = model.layers.size();
  const std::size_t n = model.hyper.num_experts;
  std::vector<std::vector<double>> mass(layers, std::vector<double>(n, 0.0));
  std::vector<double> norm_sum(layers, 0.0);

  LayerObserver<T> obs = [&](std::size_t j, const Matrix<T>&, const GatingOutput<T>& g) {
    for (std::size_t t = 0; t < g.dense_gates.rows(); ++t) {
      if (score_mode == ScoreMode::post_topk) {
        for (std::size_t a = 0; a < g.active_indices[t].size(); ++a)
          mass[j][g.active_indices[t][a]] += static_cast<double>(g.active_gates[t][a]);
      } else {
        for (std::size_t i = 0; i < n; ++i) mass[j][i] += static_cast<double>(g.dense_gates(t, i));
      }
      const auto row = norm_mode == NormMode::gate_probs ? g.dense_gates.row(t) : g.logits.row(t);
      double sq = 0.0;
      for (T v : row) sq += static_cast<double>(v) * static_cast<double>(v);
      norm_sum[j] += std::sqrt(sq);
    }
  };
  for (const auto& batch : calib.batches) model_forward(model, batch, &obs);

  CalibrationResult out;
  out.scores.token_count = calib.token_count;
  std::vector<double> raw;
  for (std::size_t j = 0; j < layers; ++j) {
    double total = 0.0;
    for (double m : mass[j]) total += m;
    MOEREPL_REQUIRE(total > 0.0, "layer received no gate mass");
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = mass[j][i] / total;
    out.scores.scores.push_back(std::move(s));
    raw.push_back(norm_sum[j] / static_cast<double>(calib.token_count));
  }
  out.norms = make_router_norm_profile(std::move(raw));
  return out;
}

template <std::floating_point T>
GateScoreTable accumulate_gate_scores(const MoEModel<T>& model, const CalibrationSet<T>& calib,
                                      ScoreMode mode = ScoreMode::post_topk) {
  return calibrate(model, calib, mode, NormMode::gate_probs).scores;
}

template <std::floating_point T>
RouterNormProfile compute_router_norms(const MoEModel<T>& model, const CalibrationSet<T>& calib,
                                       NormMode mode = NormMode::gate_probs) {
  return calibrate(model, calib, ScoreMode::post_topk, mode).norms;
}

inline nlohmann::json calibration_to_json(const GateScoreTable& scores, const RouterNormProfile& norms) {
  MOEREPL_REQUIRE(scores.scores.size() == norms.raw_norms.size(), "scores/norms layer count mismatch");
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t j = 0; j < scores.scores.size(); ++j)
    layers.push_back({{"scores", scores.scores[j]}, {"raw_norm", norms.raw_norms[j]}});
  return {{"layers", layers}, {"token_count", scores.token_count}};
}

inline CalibrationResult calibration_from_json(const nlohmann::json& j) {
  try {
    CalibrationResult r;
    std::vector<double> raw;
    for (const auto& layer : j.at("layers")) {
      r.scores.scores.push_back(layer.at("scores").get<std::vector<double>>());
      raw.push_back(layer.at("raw_norm").get<double>());
    }
    r.scores.token_count = j.at("token_count").get<std::size_t>();
    r.norms = make_router_norm_profile(std::move(raw));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed calibration document: ") + e.what());
  }
}

}  // namespace moerepl
