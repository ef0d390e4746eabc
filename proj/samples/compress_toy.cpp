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

#include <cstdio>

#include "moerepl/pipeline.hpp"

int main() {
  moerepl::ExperimentConfig cfg;
  cfg.model = moerepl::ModelHyper{16, 8, 16, 32, 8, 2, 2};
  cfg.pretrain.steps = 500;
  cfg.finetune.steps = 300;
  cfg.finetune.optimizer.lr = 1e-3;
  cfg.calibration.tokens = 8192;
  cfg.selection.target_rho = 0.3;
  cfg.validate();

  const moerepl::Model pretrained = moerepl::pretrain_model(cfg).model;
  const moerepl::RunOutcome run = moerepl::run_from_pretrained(pretrained, cfg);
  const auto& m = run.metrics;
  std::printf("rho %.4f (base threshold %.4f)\n", *m.rho, run.compress.base_threshold);
  std::printf("eval loss: pretrained %.5f, assembled %.5f, recovered %.5f\n", m.pretrained->loss, m.assembled->loss,
              m.recovered->loss);
  std::printf("expert parameters %llu -> %llu\n",
              static_cast<unsigned long long>(run.compress.assembled.report.expert_param_count_before),
              static_cast<unsigned long long>(run.compress.assembled.report.expert_param_count_after));
  return 0;
}
