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
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "moerepl.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> target_rho;
  std::optional<double> end_ratio;
  std::optional<std::size_t> rank;
  std::optional<std::string> out;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "override the experiment seed");
  sub->add_option("--target-rho", o.target_rho, "override selection.target_rho");
  sub->add_option("--end-ratio", o.end_ratio, "override schedule.end_ratio");
  sub->add_option("--rank", o.rank, "override construction.rank");
  sub->add_option("--out", o.out, "override output_dir");
}

moerepl::ExperimentConfig resolve(const Overrides& o) {
  moerepl::ExperimentConfig c = moerepl::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.target_rho) c.selection.target_rho = *o.target_rho;
  if (o.end_ratio) c.schedule.end_ratio = *o.end_ratio;
  if (o.rank) c.construction.rank = *o.rank;
  if (o.out) c.output_dir = *o.out;
  c.validate();
  return c;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump() << "\n"; }

nlohmann::json metrics_json(const moerepl::EvalMetrics& m) {
  nlohmann::json j = {{"loss", m.loss}, {"tokens", m.tokens}};
  if (m.accuracy >= 0.0) j["accuracy"] = m.accuracy;
  return j;
}

int fail(const std::string& kind, const std::string& message, nlohmann::json extra = nlohmann::json::object()) {
  extra["error"] = kind;
  extra["message"] = message;
  std::cerr << extra.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moerepl: MoE expert replacement with annealed low-rank recovery"};
  app.require_subcommand(1);
  Overrides o;
  std::optional<double> tol;
  std::optional<std::string> checkpoint;

  auto* pretrain = app.add_subcommand("pretrain", "train the toy model and write pretrain.ckpt");
  auto* calibrate = app.add_subcommand("calibrate", "gate scores and router norms from calibration tokens");
  auto* search = app.add_subcommand("search-threshold", "binary-search the base threshold for a target ratio");
  auto* compress = app.add_subcommand("compress", "select, group and assemble the compressed model");
  auto* finetune = app.add_subcommand("finetune", "annealed recovery of the compressed model");
  auto* eval = app.add_subcommand("eval", "eval-split loss of a checkpoint");
  auto* sweep = app.add_subcommand("sweep", "run the configured sweep axis over all seeds");
  auto* report = app.add_subcommand("report", "CSV report from metrics.json");
  for (auto* s : {pretrain, calibrate, search, compress, finetune, eval, sweep, report}) add_common(s, o);
  search->add_option("--tol", tol, "accepted |achieved - target| (default: selection.search_tol)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (default: latest in output_dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    const moerepl::ExperimentConfig cfg = resolve(o);
    if (pretrain->parsed()) {
      moerepl::run_pretrain(cfg);
      print_json({{"phase", "pretrain"}, {"checkpoint", cfg.output_dir + "/" + moerepl::artifact::pretrained}});
    } else if (calibrate->parsed()) {
      const auto r = moerepl::run_calibrate(cfg);
      print_json({{"phase", "calibrate"}, {"token_count", r.scores.token_count}});
    } else if (search->parsed()) {
      if (!cfg.selection.target_rho) throw moerepl::ConfigError("search-threshold needs --target-rho or selection.target_rho");
      const auto s = moerepl::run_search_threshold(cfg, *cfg.selection.target_rho, tol.value_or(cfg.selection.search_tol));
      print_json({{"phase", "search-threshold"},
                  {"base_threshold", s.base_threshold},
                  {"achieved_rho", s.achieved_rho},
                  {"within_tol", s.within_tol}});
    } else if (compress->parsed()) {
      const auto r = moerepl::run_compress(cfg);
      print_json({{"phase", "compress"}, {"rho", r.rho}});
    } else if (finetune->parsed()) {
      const auto t = moerepl::run_finetune(cfg);
      print_json({{"phase", "finetune"},
                  {"steps", t.steps()},
                  {"final_train_loss", t.loss.empty() ? nlohmann::json() : nlohmann::json(t.loss.back())}});
    } else if (eval->parsed()) {
      const auto m = checkpoint ? moerepl::run_eval(cfg, *checkpoint) : moerepl::run_eval(cfg);
      nlohmann::json j = metrics_json(m);
      j["phase"] = "eval";
      print_json(j);
    } else if (sweep->parsed()) {
      moerepl::run_sweep(cfg);
      print_json({{"phase", "sweep"}, {"table", cfg.output_dir + "/" + moerepl::artifact::sweep}});
    } else if (report->parsed()) {
      std::cout << moerepl::run_report(cfg);
    }
  } catch (const moerepl::InfeasibleTargetError& e) {
    return fail("infeasible_target", e.what(),
                {{"target_rho", e.target()}, {"max_achievable_rho", e.max_achievable()},
                 {"base_threshold_at_max", e.threshold_at_max()}});
  } catch (const moerepl::MissingArtifactError& e) {
    return fail("missing_artifact", e.what(), {{"phase", e.phase()}, {"artifact", e.artifact()}});
  } catch (const moerepl::CheckpointError& e) {
    return fail("checkpoint", e.what(), {{"kind", moerepl::CheckpointError::kind_name(e.kind())}});
  } catch (const moerepl::ConfigError& e) {
    return fail("config", e.what());
  } catch (const moerepl::IoError& e) {
    return fail("io", e.what());
  } catch (const moerepl::NumericError& e) {
    return fail("numeric", e.what());
  } catch (const moerepl::ContractError& e) {
    return fail("contract", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
