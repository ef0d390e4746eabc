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

// Deterministic synthetic tasks with skewed mode frequencies. Each hidden mode
// has its own input centroid and its own target rule, so a trained MoE
// specializes experts by mode and rarely-seen modes leave some experts with
// little gate mass.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "moerepl/errors.hpp"
#include "moerepl/matrix.hpp"
#include "moerepl/random.hpp"

namespace moerepl {

enum class TaskKind { cluster_regression, modular_classification };

inline const char* to_string(TaskKind k) {
  return k == TaskKind::cluster_regression ? "cluster-regression" : "modular-classification";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "cluster-regression") return TaskKind::cluster_regression;
  if (s == "modular-classification") return TaskKind::modular_classification;
  throw ConfigError("unknown task kind '" + s + "'");
}

enum class Split : std::uint64_t { train = 1, eval = 2 };

struct TaskSpec {
  TaskKind kind = TaskKind::cluster_regression;
  std::size_t input_dim = 16;
  std::size_t output_dim = 8;
  std::size_t num_modes = 16;
  double mode_skew = 1.0;   // mode k drawn with probability proportional to (k+1)^-skew
  double noise_std = 0.05;  // additive target noise (regression only)
  double input_spread = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_modes < 2) throw ConfigError("task.num_modes must be >= 2");
    if (input_dim == 0 || output_dim == 0) throw ConfigError("task dimensions must be positive");
    if (mode_skew < 0.0) throw ConfigError("task.mode_skew must be >= 0");
    if (noise_std < 0.0 || input_spread < 0.0) throw ConfigError("task noise/spread must be >= 0");
    if (kind == TaskKind::modular_classification && output_dim < 2)
      throw ConfigError("classification needs output_dim >= 2 classes");
  }
};

template <std::floating_point T>
struct Batch {
  Matrix<T> inputs;            // tokens x input_dim
  Matrix<T> targets;           // tokens x output_dim (regression); empty otherwise
  std::vector<int> labels;     // class per token (classification); empty otherwise
  std::vector<int> mode_labels;  // hidden mode per token, diagnostics only

  std::size_t tokens() const noexcept { return inputs.rows(); }
};

/// Planted task parameters plus the batch generator.
class SyntheticTask {
 public:
  explicit SyntheticTask(TaskSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    RandomSource rng(derive_seed(spec_.seed, {0x7461736BULL}));
    const std::size_t k = spec_.num_modes;
    centroids_ = rng.normal_matrix<double>(k, spec_.input_dim, 1.0);
    const double map_std = 1.0 / std::sqrt(static_cast<double>(spec_.input_dim));
    for (std::size_t m = 0; m < k; ++m) {
      maps_.push_back(rng.normal_matrix<double>(spec_.input_dim, spec_.output_dim, map_std));
      directions_.push_back(rng.normal_matrix<double>(1, spec_.input_dim, 1.0));
    }
    double total = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
      const double w = std::pow(static_cast<double>(m + 1), -spec_.mode_skew);
      weights_.push_back(w);
      total += w;
    }
    double acc = 0.0;
    for (double w : weights_) {
      acc += w / total;
      cdf_.push_back(acc);
    }
    cdf_.back() = 1.0;
  }

  const TaskSpec& spec() const noexcept { return spec_; }
  const Matrix<double>& centroids() const noexcept { return centroids_; }
  /// input_dim x output_dim target map of mode m.
  const Matrix<double>& target_map(std::size_t m) const { return maps_.at(m); }

  double mode_probability(std::size_t m) const { return weights_.at(m) / total_weight(); }

  /// Batch `batch_index` of `split`. A pure function of (spec, split,
  /// batch_index, tokens); train and eval draw from disjoint seed streams.
  template <std::floating_point T>
  Batch<T> generate(Split split, std::uint64_t batch_index, std::size_t tokens) const {
    MOEREPL_REQUIRE(tokens > 0, "batch needs at least one token");
    RandomSource rng(derive_seed(spec_.seed, {static_cast<std::uint64_t>(split), batch_index, tokens}));
    Batch<T> b;
    b.inputs = Matrix<T>(tokens, spec_.input_dim);
    const bool regression = spec_.kind == TaskKind::cluster_regression;
    if (regression) b.targets = Matrix<T>(tokens, spec_.output_dim);
    std::vector<double> x(spec_.input_dim);
    for (std::size_t t = 0; t < tokens; ++t) {
      const std::size_t mode = sample_mode(rng.uniform());
      b.mode_labels.push_back(static_cast<int>(mode));
      for (std::size_t j = 0; j < spec_.input_dim; ++j) {
        x[j] = centroids_(mode, j) + spec_.input_spread * rng.normal();
        b.inputs(t, j) = static_cast<T>(x[j]);
      }
      if (regression) {
        const Matrix<double>& a = maps_[mode];
        for (std::size_t o = 0; o < spec_.output_dim; ++o) {
          double y = 0.0;
          for (std::size_t j = 0; j < spec_.input_dim; ++j) y += x[j] * a(j, o);
          if (spec_.noise_std > 0.0) y += spec_.noise_std * rng.normal();
          b.targets(t, o) = static_cast<T>(y);
        }
      } else {
        double side = 0.0;
        for (std::size_t j = 0; j < spec_.input_dim; ++j)
          side += directions_[mode](0, j) * (x[j] - centroids_(mode, j));
        const std::size_t cls = (mode + (side > 0.0 ? 1 : 0)) % spec_.output_dim;
        b.labels.push_back(static_cast<int>(cls));
      }
    }
    return b;
  }

 private:
  double total_weight() const {
    double t = 0.0;
    for (double w : weights_) t += w;
    return t;
  }

  std::size_t sample_mode(double u) const {
    for (std::size_t m = 0; m < cdf_.size(); ++m)
      if (u < cdf_[m]) return m;
    return cdf_.size() - 1;
  }

  TaskSpec spec_;
  Matrix<double> centroids_;
  std::vector<Matrix<double>> maps_;
  std::vector<Matrix<double>> directions_;
  std::vector<double> weights_;
  std::vector<double> cdf_;
};

template <std::floating_point T>
Batch<T> generate(const TaskSpec& spec, Split split, std::uint64_t batch_index, std::size_t tokens) {
  return SyntheticTask(spec).generate<T>(split, batch_index, tokens);
}

/// CSV dump: mode,label_or_targets...,inputs...
template <std::floating_point T>
void write_batch_csv(const Batch<T>& b, std::ostream& os) {
  os << "mode";
  if (!b.labels.empty()) os << ",label";
  for (std::size_t o = 0; !b.targets.empty() && o < b.targets.cols(); ++o) os << ",y" << o;
  for (std::size_t j = 0; j < b.inputs.cols(); ++j) os << ",x" << j;
  os << '\n';
  for (std::size_t t = 0; t < b.tokens(); ++t) {
    os << b.mode_labels[t];
    if (!b.labels.empty()) os << ',' << b.labels[t];
    for (std::size_t o = 0; !b.targets.empty() && o < b.targets.cols(); ++o) os << ',' << b.targets(t, o);
    for (std::size_t j = 0; j < b.inputs.cols(); ++j) os << ',' << b.inputs(t, j);
    os << '\n';
  }
}

}  // namespace moerepl
