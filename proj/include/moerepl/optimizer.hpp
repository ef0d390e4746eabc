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

// AdamW with decoupled weight decay.

#include <cmath>
#include <concepts>
#include <map>
#include <string>

#include "moerepl/autodiff.hpp"
#include "moerepl/parameters.hpp"

namespace moerepl {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <std::floating_point T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return step_; }

  /// Applies one update to every parameter of `params` that has an entry in
  /// `grads` and is listed in `mask`. Everything else is left bit-unchanged.
  template <class Params>
  void step(Params& params, const ad::GradientMap<T>& grads, const TrainableMask& mask) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    visit_parameters(params, [&](const std::string& name, Matrix<T>& w, ParamClass) {
      if (!mask.contains(name)) return;
      auto g_it = grads.find(name);
      if (g_it == grads.end()) return;
      const Matrix<T>& g = g_it->second;
      MOEREPL_REQUIRE(g.same_shape(w), "gradient shape mismatch for " + name);
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh) {
        it->second.m = Matrix<T>(w.rows(), w.cols());
        it->second.v = Matrix<T>(w.rows(), w.cols());
      }
      auto m = it->second.m.data();
      auto v = it->second.v.data();
      auto wd = w.data();
      auto gd = g.data();
      const T b1 = static_cast<T>(cfg_.beta1);
      const T b2 = static_cast<T>(cfg_.beta2);
      const T lr = static_cast<T>(cfg_.lr);
      const T decay = static_cast<T>(cfg_.lr * cfg_.weight_decay);
      const T c1 = static_cast<T>(bc1);
      const T c2 = static_cast<T>(bc2);
      const T eps = static_cast<T>(cfg_.eps);
      for (std::size_t i = 0; i < wd.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * gd[i];
        v[i] = b2 * v[i] + (T{1} - b2) * gd[i] * gd[i];
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        wd[i] -= decay * wd[i];
        wd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    });
  }

 private:
  struct Moments {
    Matrix<T> m;
    Matrix<T> v;
  };
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace moerepl
