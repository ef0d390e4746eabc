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

// Central-difference check of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moerepl/autodiff.hpp"
#include "moerepl/parameters.hpp"
#include "moerepl/random.hpp"

namespace moerepl {

struct GradReport {
  double max_relative_error = 0.0;
  std::string worst_parameter_id;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t probes = 0;
  std::map<std::string, std::size_t> probes_per_class;
};

struct GradCheckOptions {
  std::size_t probes = 64;
  double h = 1e-5;
  std::uint64_t seed = 0;
  double abs_floor = 1e-8;
};

/// Probes are spread round-robin over the parameter classes present in
/// `mask`, uniformly over scalars within a class. `loss_fn(tape, params,
/// mask)` must record a scalar loss.
template <class Params, class LossFn>
GradReport grad_check(Params& params, const TrainableMask& mask, LossFn&& loss_fn, const GradCheckOptions& opt = {}) {
  MOEREPL_REQUIRE(opt.probes >= 1, "grad_check needs at least one probe");
  MOEREPL_REQUIRE(opt.h > 0.0 && opt.h <= 1e-2, "grad_check step h must be in (0, 1e-2]");

  struct Slot {
    std::string name;
    Matrix<double>* m;
  };
  std::vector<ParamClass> class_order;
  std::map<ParamClass, std::vector<Slot>> by_class;
  visit_parameters(params, [&](const std::string& name, Matrix<double>& m, ParamClass c) {
    if (!mask.contains(name)) return;
    if (!by_class.contains(c)) class_order.push_back(c);
    by_class[c].push_back({name, &m});
  });
  MOEREPL_REQUIRE(!class_order.empty(), "grad_check: mask selects no parameters");

  ad::GradientMap<double> grads;
  {
    ad::Tape<double> tape(true);
    ad::Var<double> loss = loss_fn(tape, static_cast<const Params&>(params), mask);
    grads = tape.backward(loss);
  }
  auto eval = [&]() {
    ad::Tape<double> tape(false);
    return loss_fn(tape, static_cast<const Params&>(params), mask).value()(0, 0);
  };

  RandomSource rng(derive_seed(opt.seed, {0x67726164ULL}));
  GradReport report;
  for (std::size_t p = 0; p < opt.probes; ++p) {
    const ParamClass c = class_order[p % class_order.size()];
    const auto& slots = by_class[c];
    std::size_t total = 0;
    for (const auto& s : slots) total += s.m->size();
    std::size_t pick = rng.below(total);
    const Slot* slot = nullptr;
    for (const auto& s : slots) {
      if (pick < s.m->size()) {
        slot = &s;
        break;
      }
      pick -= s.m->size();
    }
    double& x = slot->m->data()[pick];
    const double saved = x;
    x = saved + opt.h;
    const double fp = eval();
    x = saved - opt.h;
    const double fm = eval();
    x = saved;
    const double numeric = (fp - fm) / (2.0 * opt.h);
    auto g = grads.find(slot->name);
    const double analytic = g == grads.end() ? 0.0 : g->second.data()[pick];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++report.probes;
    ++report.probes_per_class[to_string(c)];
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter_id = slot->name + "[" + std::to_string(pick) + "]";
      report.analytic = analytic;
      report.numeric = numeric;
    }
  }
  return report;
}

}  // namespace moerepl
