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

// Annealing factor schedules and the interpolated expert weight
//   W* = beta * W + (1 - beta) * W_share + B * A.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "moerepl/autodiff.hpp"
#include "moerepl/errors.hpp"
#include "moerepl/matrix.hpp"

namespace moerepl {

/// Linear decay: max(1 - t / (end_ratio * T), 0). end_ratio == 0 is direct
/// replacement, i.e. beta is 0 from the first step.
inline double beta_linear(double t, double total_steps, double end_ratio) {
  MOEREPL_REQUIRE(total_steps > 0.0, "total_steps must be positive");
  MOEREPL_REQUIRE(end_ratio >= 0.0 && end_ratio <= 1.0, "end_ratio must be in [0, 1]");
  MOEREPL_REQUIRE(t >= 0.0, "step must be non-negative");
  if (end_ratio == 0.0) return 0.0;
  return std::max(1.0 - t / (end_ratio * total_steps), 0.0);
}

/// Exponential decay with curvature gamma:
///   max((exp(-gamma*tau) - exp(-gamma)) / (1 - exp(-gamma)), 0), tau = t / (end_ratio * T).
inline double beta_exponential(double t, double total_steps, double end_ratio, double gamma) {
  MOEREPL_REQUIRE(total_steps > 0.0, "total_steps must be positive");
  MOEREPL_REQUIRE(end_ratio >= 0.0 && end_ratio <= 1.0, "end_ratio must be in [0, 1]");
  MOEREPL_REQUIRE(gamma > 0.0, "gamma must be positive");
  MOEREPL_REQUIRE(t >= 0.0, "step must be non-negative");
  if (end_ratio == 0.0) return 0.0;
  const double tau = t / (end_ratio * total_steps);
  if (tau >= 1.0) return 0.0;
  const double floor = std::exp(-gamma);
  return std::max((std::exp(-gamma * tau) - floor) / (1.0 - floor), 0.0);
}

enum class ScheduleKind { linear, exponential };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "exponential"; }

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "exponential") return ScheduleKind::exponential;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

struct AnnealSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  double end_ratio = 0.2;
  double gamma = 3.0;
  std::size_t total_steps = 1;

  void validate() const {
    if (end_ratio < 0.0 || end_ratio > 1.0) throw ConfigError("schedule.end_ratio must be in [0, 1]");
    if (gamma <= 0.0) throw ConfigError("schedule.gamma must be positive");
    if (total_steps == 0) throw ConfigError("schedule needs at least one step");
  }

  double beta(std::size_t t) const {
    const double td = static_cast<double>(t);
    const double total = static_cast<double>(total_steps);
    return kind == ScheduleKind::linear ? beta_linear(td, total, end_ratio)
                                        : beta_exponential(td, total, end_ratio, gamma);
  }

  /// First step at which beta is exactly zero.
  std::size_t anneal_end_step() const {
    return static_cast<std::size_t>(std::ceil(end_ratio * static_cast<double>(total_steps)));
  }
};

struct AnnealState {
  std::size_t step = 0;
  double beta = 1.0;
};

/// Plain-matrix W*. `original` may be absent only when beta == 0.
template <std::floating_point T>
Matrix<T> effective_weight(const Matrix<T>* original, const Matrix<T>& base, const Matrix<T>& b,
                           const Matrix<T>& a, double beta) {
  MOEREPL_REQUIRE(beta >= 0.0 && beta <= 1.0, "beta must be in [0, 1]");
  Matrix<T> out(base.rows(), base.cols());
  if (beta > 0.0) {
    MOEREPL_REQUIRE(original != nullptr, "beta > 0 needs the original weights");
    MOEREPL_REQUIRE(original->same_shape(base), "original/base shape mismatch");
    add_inplace(out, scale(*original, static_cast<T>(beta)));
  }
  if (beta < 1.0) add_inplace(out, scale(base, static_cast<T>(1.0 - beta)));
  add_inplace(out, matmul(b, a));
  return out;
}

namespace ad {

/// Recorded W*. Gradients reach `base` and the adapter factors only if they
/// are trainable leaves; the original is always a constant in practice.
template <std::floating_point T>
Var<T> effective_weight(const std::optional<Var<T>>& original, const Var<T>& base, const Var<T>& b,
                        const Var<T>& a, double beta) {
  MOEREPL_REQUIRE(beta >= 0.0 && beta <= 1.0, "beta must be in [0, 1]");
  std::optional<Var<T>> acc;
  if (beta > 0.0) {
    MOEREPL_REQUIRE(original.has_value(), "beta > 0 needs the original weights");
    acc = scale(*original, static_cast<T>(beta));
  }
  if (beta < 1.0) {
    Var<T> s = scale(base, static_cast<T>(1.0 - beta));
    acc = acc ? add(*acc, s) : s;
  }
  return add(*acc, matmul(b, a));
}

}  // namespace ad
}  // namespace moerepl
