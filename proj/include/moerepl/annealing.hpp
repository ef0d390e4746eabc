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

// Recovery fine-tuning with annealed expert replacement. Each step sets the
// model-wide beta from the schedule, then runs one AdamW step on adapter
// parameters only. Originals, bases, routers and all dense weights stay frozen.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "moerepl/construction.hpp"
#include "moerepl/evaluation.hpp"
#include "moerepl/model.hpp"
#include "moerepl/optimizer.hpp"
#include "moerepl/schedule.hpp"
#include "moerepl/tasks.hpp"

namespace moerepl {

struct LossTrace {
  std::vector<double> loss;
  std::vector<double> beta;
  std::optional<std::size_t> swap_step;  // set for direct replacement (end_ratio == 0)
  std::size_t anneal_end_step = 0;
  // Eval-split loss at step 0, before any update. NaN if not measured.
  double step0_eval_loss = std::numeric_limits<double>::quiet_NaN();

  std::size_t steps() const noexcept { return loss.size(); }
};

class FinetuneAborted : public NumericError {
 public:
  FinetuneAborted(const std::string& what, LossTrace trace) : NumericError(what), trace_(std::move(trace)) {}
  const LossTrace& trace() const noexcept { return trace_; }

 private:
  LossTrace trace_;
};

/// Train-split batches used for recovery start here, disjoint from pretraining.
inline constexpr std::uint64_t kFinetuneStream = 1ULL << 32;

struct FinetuneOptions {
  AnnealSchedule schedule;  // total_steps is the number of steps run
  std::size_t batch_size = 32;
  AdamWConfig optimizer{};
  bool train_retained_adapters = true;
  std::uint64_t first_batch = kFinetuneStream;
  std::size_t eval_tokens = 0;  // > 0 measures step0_eval_loss
  std::size_t eval_batch_tokens = 1024;
};

/// Adapter parameters the recovery phase may update.
template <std::floating_point T>
TrainableMask recovery_mask(const MoEModel<T>& model, bool include_retained) {
  TrainableMask mask;
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    for (std::size_t i = 0; i < model.layers[j].experts.size(); ++i) {
      const auto& slot = model.layers[j].experts[i];
      if (!slot.adapter) continue;
      if (slot.form == ExpertForm::dense && !include_retained) continue;
      const std::string p = expert_prefix(j, i) + ".adapter.";
      for (const char* s : {"w_in.a", "w_in.b", "w_out.a", "w_out.b"}) mask.insert(p + s);
    }
  }
  return mask;
}

/// Runs `schedule.total_steps` recovery steps and, if any ran, finalizes the
/// compression (beta = 0, originals dropped, retained adapters merged).
/// With zero steps the model is left exactly as assembled.
template <std::floating_point T>
LossTrace finetune(MoEModel<T>& model, const SyntheticTask& task, const FinetuneOptions& opt, std::size_t steps) {
  LossTrace trace;
  if (steps == 0) return trace;
  AnnealSchedule sched = opt.schedule;
  sched.total_steps = steps;
  sched.validate();
  trace.anneal_end_step = sched.anneal_end_step();
  if (sched.end_ratio == 0.0) trace.swap_step = 0;

  const TrainableMask mask = recovery_mask(model, opt.train_retained_adapters);
  AdamW<T> adam(opt.optimizer);
  for (std::size_t t = 0; t < steps; ++t) {
    model.beta = sched.beta(t);
    if (t == 0 && opt.eval_tokens > 0)
      trace.step0_eval_loss = evaluate(model, task, opt.eval_tokens, opt.eval_batch_tokens).loss;
    const Batch<T> batch = task.generate<T>(Split::train, opt.first_batch + t, opt.batch_size);
    double loss;
    try {
      loss = train_step(model, batch, adam, mask);
    } catch (const NumericError& e) {
      throw FinetuneAborted(std::string("finetune aborted at step ") + std::to_string(t) + ": " + e.what(), trace);
    }
    trace.loss.push_back(loss);
    trace.beta.push_back(model.beta);
  }
  finalize_compression(model);
  return trace;
}

inline void write_trace_csv(const LossTrace& trace, std::ostream& os) {
  os << "step,loss,beta\n";
  char buf[96];
  for (std::size_t t = 0; t < trace.loss.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", t, trace.loss[t], trace.beta[t]);
    os << buf;
  }
}

}  // namespace moerepl
