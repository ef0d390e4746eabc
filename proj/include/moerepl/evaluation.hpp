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

#include <cstdint>

#include "moerepl/model.hpp"
#include "moerepl/tasks.hpp"

namespace moerepl {

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = -1.0;  // classification only; -1 for regression
  std::size_t tokens = 0;
};

/// Token-weighted mean loss (and accuracy) over the first `tokens` eval-split
/// tokens, in batches of `batch_tokens`.
template <std::floating_point T>
EvalMetrics evaluate(const MoEModel<T>& model, const SyntheticTask& task, std::size_t tokens,
                     std::size_t batch_tokens = 1024) {
  MOEREPL_REQUIRE(tokens > 0 && batch_tokens > 0, "eval budget must be positive");
  EvalMetrics m;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const bool classify = task.spec().kind == TaskKind::modular_classification;
  std::uint64_t index = 0;
  while (m.tokens < tokens) {
    const std::size_t n = std::min(batch_tokens, tokens - m.tokens);
    const Batch<T> b = task.generate<T>(Split::eval, index++, n);
    ad::Tape<T> tape(false);
    const TrainableMask none;
    LeafCache<T> leaves(tape, none);
    ad::Var<T> pred = model_forward(leaves, model, b.inputs);
    loss_sum += static_cast<double>(batch_loss(pred, b).value()(0, 0)) * static_cast<double>(n);
    if (classify) {
      const Matrix<T>& p = pred.value();
      for (std::size_t t = 0; t < n; ++t) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.cols(); ++c)
          if (p(t, c) > p(t, best)) best = c;
        if (static_cast<int>(best) == b.labels[t]) ++correct;
      }
    }
    m.tokens += n;
  }
  m.loss = loss_sum / static_cast<double>(m.tokens);
  if (classify) m.accuracy = static_cast<double>(correct) / static_cast<double>(m.tokens);
  return m;
}

}  // namespace moerepl
