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

// Orchestration: pretrain -> calibrate -> select/group/construct -> recover ->
// evaluate, both in memory and as file-backed phases under one output directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/annealing.hpp"
#include "moerepl/calibration.hpp"
#include "moerepl/checkpoint.hpp"
#include "moerepl/config.hpp"
#include "moerepl/construction.hpp"
#include "moerepl/evaluation.hpp"
#include "moerepl/grouping.hpp"
#include "moerepl/selection.hpp"

namespace moerepl {

using Real = float;
using Model = MoEModel<Real>;

namespace artifact {
inline constexpr const char* config = "config.json";
inline constexpr const char* pretrained = "pretrain.ckpt";
inline constexpr const char* pretrain_trace = "pretrain_trace.csv";
inline constexpr const char* calibration = "calibration.json";
inline constexpr const char* threshold = "threshold.json";
inline constexpr const char* selection = "selection.json";
inline constexpr const char* compression = "compression.json";
inline constexpr const char* compressed = "compressed.ckpt";
inline constexpr const char* finetune_trace = "finetune_trace.csv";
inline constexpr const char* finetuned = "finetuned.ckpt";
inline constexpr const char* metrics = "metrics.json";
inline constexpr const char* eval = "eval.json";
inline constexpr const char* report = "report.csv";
inline constexpr const char* sweep = "sweep.csv";
inline constexpr const char* sweep_summary = "sweep_summary.csv";
}  // namespace artifact

inline constexpr const char* kReportCsvHeader = "phase,seed,value,rho,eval_loss,eval_acc,wall_ms";

inline std::uint64_t model_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {1}); }
inline std::uint64_t adapter_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {2}); }
inline std::uint64_t kmeans_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {3}); }

class PhaseClock {
 public:
  explicit PhaseClock(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

struct MetricsReport {
  std::uint64_t seed = 0;
  std::optional<EvalMetrics> pretrained, assembled, recovered;
  std::optional<double> rho;
  std::map<std::string, double> wall_ms;
};

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  auto em = [](const std::optional<EvalMetrics>& m) -> nlohmann::json {
    if (!m) return nullptr;
    nlohmann::json j = {{"loss", m->loss}, {"tokens", m->tokens}};
    j["accuracy"] = m->accuracy < 0.0 ? nlohmann::json() : nlohmann::json(m->accuracy);
    return j;
  };
  return {{"seed", r.seed},
          {"pretrained", em(r.pretrained)},
          {"assembled", em(r.assembled)},
          {"recovered", em(r.recovered)},
          {"rho", r.rho ? nlohmann::json(*r.rho) : nlohmann::json()},
          {"wall_ms", r.wall_ms}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  auto em = [](const nlohmann::json& v) -> std::optional<EvalMetrics> {
    if (v.is_null()) return std::nullopt;
    EvalMetrics m;
    m.loss = v.at("loss").get<double>();
    m.tokens = v.at("tokens").get<std::size_t>();
    m.accuracy = v.at("accuracy").is_null() ? -1.0 : v.at("accuracy").get<double>();
    return m;
  };
  MetricsReport r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.pretrained = em(j.at("pretrained"));
  r.assembled = em(j.at("assembled"));
  r.recovered = em(j.at("recovered"));
  if (!j.at("rho").is_null()) r.rho = j.at("rho").get<double>();
  r.wall_ms = j.at("wall_ms").get<std::map<std::string, double>>();
  return r;
}

// ---------------------------------------------------------------------------
// In-memory phases

struct PretrainOutcome {
  Model model;
  std::vector<double> loss;
};

inline PretrainOutcome pretrain_model(const ExperimentConfig& cfg) {
  const SyntheticTask task(cfg.resolved_task());
  PretrainOutcome out{init_model<Real>(cfg.model, model_seed(cfg)), {}};
  const TrainableMask mask = mask_all(out.model);
  AdamW<Real> adam(cfg.pretrain.optimizer);
  for (std::size_t t = 0; t < cfg.pretrain.steps; ++t) {
    const Batch<Real> batch = task.generate<Real>(Split::train, t, cfg.pretrain.batch_size);
    out.loss.push_back(train_step(out.model, batch, adam, mask, cfg.pretrain.load_balance));
  }
  return out;
}

struct CalibrationOutcome {
  CalibrationSet<Real> set;
  CalibrationResult result;
};

inline CalibrationOutcome calibrate_model(const Model& model, const ExperimentConfig& cfg) {
  const SyntheticTask task(cfg.resolved_task());
  CalibrationOutcome out;
  out.set = make_calibration_set<Real>(task, cfg.calibration.tokens, cfg.calibration.batch_tokens);
  out.result = calibrate(model, out.set, cfg.calibration.score_mode, cfg.calibration.norm_mode);
  return out;
}

/// Selection plan at base threshold `p` for the configured method. A zero
/// threshold selects nothing.
inline SelectionPlan select_at(const CalibrationResult& calib, const ExperimentConfig& cfg, double p) {
  const std::optional<std::size_t> cap =
      cfg.selection.cap ? std::optional<std::size_t>(cfg.model.num_experts - cfg.model.top_k) : std::nullopt;
  if (p <= 0.0) return uniform_select(calib.scores, 0.0, cap);
  ThresholdConfig tc = cfg.selection.threshold;
  tc.base_threshold = p;
  const SelectionPlan adaptive = select_candidates(calib.scores, adaptive_thresholds(calib.norms, tc), cap);
  switch (cfg.selection.method) {
    case SelectionMethod::adaptive: return adaptive;
    case SelectionMethod::uniform: return uniform_select(calib.scores, p, cap);
    case SelectionMethod::average: return average_select(calib.scores, mean_candidate_count(adaptive));
  }
  return adaptive;
}

inline std::vector<std::size_t> planned_group_counts(const SelectionPlan& plan, const ExperimentConfig& cfg) {
  std::vector<std::size_t> m;
  for (const auto& l : plan.layers)
    m.push_back(cfg.construction.replace_mode == ReplaceMode::adapter_only
                    ? 0
                    : ceil_div(l.candidate_ids.size(), cfg.grouping.group_size));
  return m;
}

inline CompressionReport planned_report(const SelectionPlan& plan, const ExperimentConfig& cfg) {
  std::vector<std::size_t> replaced;
  for (const auto& l : plan.layers) replaced.push_back(l.candidate_ids.size());
  return compression_report(cfg.model, replaced, planned_group_counts(plan, cfg), cfg.construction.rank);
}

struct ThresholdProbe {
  double base_threshold = 0.0;
  double rho = 0.0;
};

struct ThresholdSearch {
  double target_rho = 0.0;
  double base_threshold = 0.0;
  double achieved_rho = 0.0;
  bool within_tol = false;
  std::vector<ThresholdProbe> probes;
};

inline constexpr double kThresholdLow = 1e-4;
inline constexpr double kThresholdHigh = 0.999;
inline constexpr std::size_t kThresholdIterations = 40;

/// Bisection on the base threshold. Compression grows with the threshold, so
/// the search keeps the bracket [lo, hi] around the target and returns the
/// probe closest to it. Throws InfeasibleTargetError when even the upper bound
/// falls short by more than `tol`.
inline ThresholdSearch search_threshold(const CalibrationResult& calib, const ExperimentConfig& cfg, double target,
                                        double tol) {
  if (!(target >= 0.0 && target < 1.0)) throw ConfigError("target_rho must be in [0, 1)");
  if (!(tol > 0.0)) throw ConfigError("search tolerance must be positive");
  ThresholdSearch s;
  s.target_rho = target;
  if (target == 0.0) {
    s.within_tol = true;
    s.probes.push_back({0.0, 0.0});
    return s;
  }
  auto rho_at = [&](double p) {
    const double r = planned_report(select_at(calib, cfg, p), cfg).rho;
    s.probes.push_back({p, r});
    return r;
  };
  double lo = kThresholdLow, hi = kThresholdHigh;
  std::optional<ThresholdProbe> best;
  auto consider = [&](double p, double r) {
    if (!best || std::abs(r - target) < std::abs(best->rho - target)) best = ThresholdProbe{p, r};
  };
  for (std::size_t it = 0; it < kThresholdIterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = rho_at(mid);
    consider(mid, r);
    if (std::abs(r - target) <= tol) break;
    (r < target ? lo : hi) = mid;
  }
  if (std::abs(best->rho - target) > tol) {
    const double r_hi = rho_at(kThresholdHigh);
    consider(kThresholdHigh, r_hi);
    if (r_hi < target - tol) throw InfeasibleTargetError(target, r_hi, kThresholdHigh);
  }
  s.base_threshold = best->base_threshold;
  s.achieved_rho = best->rho;
  s.within_tol = std::abs(best->rho - target) <= tol;
  return s;
}

inline nlohmann::json search_to_json(const ThresholdSearch& s) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : s.probes) probes.push_back({{"base_threshold", p.base_threshold}, {"rho", p.rho}});
  return {{"target_rho", s.target_rho},
          {"base_threshold", s.base_threshold},
          {"achieved_rho", s.achieved_rho},
          {"within_tol", s.within_tol},
          {"probes", probes}};
}

struct CompressOutcome {
  AssembledModel<Real> assembled;
  SelectionPlan plan;
  GroupAssignment groups;
  double base_threshold = 0.0;
  std::optional<ThresholdSearch> search;
};

/// Selection, grouping and assembly. With a configured target ratio the base
/// threshold comes from search_threshold; otherwise from `base_threshold`
/// (defaulting to the configured one).
inline CompressOutcome compress_model(const Model& model, const CalibrationOutcome& calib, const ExperimentConfig& cfg,
                                      std::optional<double> base_threshold = std::nullopt) {
  CompressOutcome out;
  if (cfg.selection.target_rho) {
    out.search = search_threshold(calib.result, cfg, *cfg.selection.target_rho, cfg.selection.search_tol);
    out.base_threshold = out.search->base_threshold;
  } else {
    out.base_threshold = base_threshold.value_or(cfg.selection.threshold.base_threshold);
  }
  out.plan = select_at(calib.result, cfg, out.base_threshold);
  const GateScoreTable& scores = calib.result.scores;
  if (cfg.grouping.method == GroupingMethod::dominant) {
    out.groups = dominant_group(model, &calib.set, out.plan, scores, cfg.grouping.group_size, cfg.grouping.similarity);
  } else {
    out.groups = kmeans_group(model, calib.set, out.plan, scores, planned_group_counts(out.plan, cfg), kmeans_seed(cfg),
                              cfg.grouping.group_size);
  }
  AssembleOptions opt;
  opt.rank = cfg.construction.rank;
  opt.attach_retained_adapters = cfg.construction.retained_adapters;
  opt.replace_mode = cfg.construction.replace_mode;
  opt.seed = adapter_seed(cfg);
  GroupAssignment for_assembly = out.groups;
  if (opt.replace_mode == ReplaceMode::adapter_only)
    for (std::size_t j = 0; j < out.plan.layers.size(); ++j) {
      for_assembly.layers[j].groups.clear();
      for (std::size_t e : out.plan.layers[j].candidate_ids) for_assembly.layers[j].groups.push_back(Group{e, {e}});
    }
  out.assembled = assemble_compressed_model(model, out.plan, for_assembly, scores, opt);
  return out;
}

inline FinetuneOptions finetune_options(const ExperimentConfig& cfg) {
  FinetuneOptions o;
  o.schedule = cfg.schedule;
  o.batch_size = cfg.finetune.batch_size;
  o.optimizer = cfg.finetune.optimizer;
  o.train_retained_adapters = cfg.construction.retained_adapters;
  o.eval_tokens = cfg.eval.tokens;
  o.eval_batch_tokens = cfg.eval.batch_tokens;
  return o;
}

inline EvalMetrics evaluate_model(const Model& model, const ExperimentConfig& cfg) {
  return evaluate(model, SyntheticTask(cfg.resolved_task()), cfg.eval.tokens, cfg.eval.batch_tokens);
}

struct RunOutcome {
  Model recovered;
  CompressOutcome compress;
  LossTrace trace;
  MetricsReport metrics;
};

/// Everything after pretraining, for one configuration.
inline RunOutcome run_from_pretrained(const Model& pretrained, const ExperimentConfig& cfg,
                                      const CalibrationOutcome* calib = nullptr) {
  RunOutcome out;
  out.metrics.seed = cfg.seed;
  const SyntheticTask task(cfg.resolved_task());
  out.metrics.pretrained = evaluate_model(pretrained, cfg);
  PhaseClock clock(cfg.record_wall_time);
  std::optional<CalibrationOutcome> own;
  if (!calib) calib = &own.emplace(calibrate_model(pretrained, cfg));
  out.metrics.wall_ms["calibrate"] = clock.ms();
  PhaseClock cclock(cfg.record_wall_time);
  out.compress = compress_model(pretrained, *calib, cfg);
  out.metrics.rho = out.compress.assembled.report.rho;
  out.metrics.wall_ms["compress"] = cclock.ms();
  out.metrics.assembled = evaluate_model(out.compress.assembled.model, cfg);
  PhaseClock fclock(cfg.record_wall_time);
  out.recovered = out.compress.assembled.model;
  out.trace = finetune(out.recovered, task, finetune_options(cfg), cfg.finetune.steps);
  out.metrics.wall_ms["finetune"] = fclock.ms();
  out.metrics.recovered = evaluate_model(out.recovered, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// File-backed phases

namespace detail {

inline std::filesystem::path out_path(const ExperimentConfig& cfg, const char* name) {
  return std::filesystem::path(cfg.output_dir) / name;
}

inline void ensure_output_dir(const ExperimentConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.output_dir + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + p.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed for " + p.string());
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline std::filesystem::path require_artifact(const ExperimentConfig& cfg, const char* phase, const char* name) {
  const auto p = out_path(cfg, name);
  if (!std::filesystem::exists(p)) throw MissingArtifactError(phase, p.string());
  return p;
}

inline MetricsReport load_metrics(const ExperimentConfig& cfg) {
  const auto p = out_path(cfg, artifact::metrics);
  if (!std::filesystem::exists(p)) {
    MetricsReport r;
    r.seed = cfg.seed;
    return r;
  }
  return metrics_from_json(read_json(p));
}

inline void store_metrics(const ExperimentConfig& cfg, const MetricsReport& r) {
  write_json(out_path(cfg, artifact::metrics), metrics_to_json(r));
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_row(const std::string& phase, const std::string& seed, const std::string& value,
                           std::optional<double> rho, const std::optional<EvalMetrics>& m, double wall_ms) {
  std::string row = phase + "," + seed + "," + value + ",";
  row += rho ? fmt(*rho) : "";
  row += ",";
  row += m ? fmt(m->loss) : "";
  row += ",";
  row += (m && m->accuracy >= 0.0) ? fmt(m->accuracy) : "";
  row += "," + fmt(wall_ms) + "\n";
  return row;
}

inline Model load_model(const std::filesystem::path& p) { return from_checkpoint<Real>(load_checkpoint(p)); }

}  // namespace detail

inline Model run_pretrain(const ExperimentConfig& cfg) {
  detail::ensure_output_dir(cfg);
  detail::write_json(detail::out_path(cfg, artifact::config), config_to_json(cfg));
  PhaseClock clock(cfg.record_wall_time);
  PretrainOutcome po;
  try {
    po = pretrain_model(cfg);
  } catch (const NumericError& e) {
    throw NumericError(std::string("pretraining aborted: ") + e.what());
  }
  save_checkpoint(to_checkpoint(po.model), detail::out_path(cfg, artifact::pretrained));
  std::ostringstream trace;
  trace << "step,loss\n";
  for (std::size_t t = 0; t < po.loss.size(); ++t) trace << t << "," << detail::fmt(po.loss[t]) << "\n";
  detail::write_text(detail::out_path(cfg, artifact::pretrain_trace), trace.str());
  MetricsReport m;
  m.seed = cfg.seed;
  m.wall_ms["pretrain"] = clock.ms();
  m.pretrained = evaluate_model(po.model, cfg);
  detail::store_metrics(cfg, m);
  return po.model;
}

inline CalibrationResult run_calibrate(const ExperimentConfig& cfg) {
  const Model model = detail::load_model(detail::require_artifact(cfg, "calibrate", artifact::pretrained));
  PhaseClock clock(cfg.record_wall_time);
  const CalibrationOutcome c = calibrate_model(model, cfg);
  detail::write_json(detail::out_path(cfg, artifact::calibration), calibration_to_json(c.result.scores, c.result.norms));
  MetricsReport m = detail::load_metrics(cfg);
  m.wall_ms["calibrate"] = clock.ms();
  detail::store_metrics(cfg, m);
  return c.result;
}

inline ThresholdSearch run_search_threshold(const ExperimentConfig& cfg, double target, double tol) {
  detail::require_artifact(cfg, "search-threshold", artifact::pretrained);
  const CalibrationResult calib =
      calibration_from_json(detail::read_json(detail::require_artifact(cfg, "search-threshold", artifact::calibration)));
  const ThresholdSearch s = search_threshold(calib, cfg, target, tol);
  detail::write_json(detail::out_path(cfg, artifact::threshold), search_to_json(s));
  return s;
}

/// Uses the configured target ratio if any, else a previously written
/// threshold.json, else the configured base threshold.
inline CompressionReport run_compress(const ExperimentConfig& cfg) {
  const Model model = detail::load_model(detail::require_artifact(cfg, "compress", artifact::pretrained));
  CalibrationOutcome calib;
  calib.result =
      calibration_from_json(detail::read_json(detail::require_artifact(cfg, "compress", artifact::calibration)));
  calib.set = make_calibration_set<Real>(SyntheticTask(cfg.resolved_task()), cfg.calibration.tokens,
                                         cfg.calibration.batch_tokens);
  std::optional<double> p;
  const auto tpath = detail::out_path(cfg, artifact::threshold);
  if (!cfg.selection.target_rho && std::filesystem::exists(tpath))
    p = detail::read_json(tpath).at("base_threshold").get<double>();
  PhaseClock clock(cfg.record_wall_time);
  const CompressOutcome c = compress_model(model, calib, cfg, p);
  if (c.search) detail::write_json(tpath, search_to_json(*c.search));
  nlohmann::json sel = selection_to_json(c.plan, c.groups);
  sel["base_threshold"] = c.base_threshold;
  detail::write_json(detail::out_path(cfg, artifact::selection), sel);
  detail::write_json(detail::out_path(cfg, artifact::compression), report_to_json(c.assembled.report));
  save_checkpoint(to_checkpoint(c.assembled.model), detail::out_path(cfg, artifact::compressed));
  MetricsReport m = detail::load_metrics(cfg);
  m.wall_ms["compress"] = clock.ms();
  m.rho = c.assembled.report.rho;
  m.assembled = evaluate_model(c.assembled.model, cfg);
  detail::store_metrics(cfg, m);
  return c.assembled.report;
}

inline LossTrace run_finetune(const ExperimentConfig& cfg) {
  Model model = detail::load_model(detail::require_artifact(cfg, "finetune", artifact::compressed));
  PhaseClock clock(cfg.record_wall_time);
  const LossTrace trace = finetune(model, SyntheticTask(cfg.resolved_task()), finetune_options(cfg), cfg.finetune.steps);
  std::ostringstream os;
  write_trace_csv(trace, os);
  detail::write_text(detail::out_path(cfg, artifact::finetune_trace), os.str());
  save_checkpoint(to_checkpoint(model), detail::out_path(cfg, artifact::finetuned));
  MetricsReport m = detail::load_metrics(cfg);
  m.wall_ms["finetune"] = clock.ms();
  m.recovered = evaluate_model(model, cfg);
  detail::store_metrics(cfg, m);
  return trace;
}

/// Evaluates `checkpoint`, or the most advanced checkpoint in the output directory.
inline EvalMetrics run_eval(const ExperimentConfig& cfg, std::optional<std::filesystem::path> checkpoint = std::nullopt) {
  if (!checkpoint) {
    for (const char* name : {artifact::finetuned, artifact::compressed, artifact::pretrained}) {
      const auto p = detail::out_path(cfg, name);
      if (std::filesystem::exists(p)) {
        checkpoint = p;
        break;
      }
    }
    if (!checkpoint) throw MissingArtifactError("eval", detail::out_path(cfg, artifact::pretrained).string());
  }
  const EvalMetrics m = evaluate_model(detail::load_model(*checkpoint), cfg);
  nlohmann::json j = {{"checkpoint", checkpoint->filename().string()}, {"loss", m.loss}, {"tokens", m.tokens}};
  j["accuracy"] = m.accuracy < 0.0 ? nlohmann::json() : nlohmann::json(m.accuracy);
  detail::write_json(detail::out_path(cfg, artifact::eval), j);
  return m;
}

inline std::string report_csv(const MetricsReport& m) {
  const std::string seed = std::to_string(m.seed);
  auto wall = [&](const char* k) {
    auto it = m.wall_ms.find(k);
    return it == m.wall_ms.end() ? 0.0 : it->second;
  };
  std::string out = std::string(kReportCsvHeader) + "\n";
  out += detail::csv_row("pretrained", seed, "", 0.0, m.pretrained, wall("pretrain"));
  out += detail::csv_row("assembled", seed, "", m.rho, m.assembled, wall("compress"));
  out += detail::csv_row("recovered", seed, "", m.rho, m.recovered, wall("finetune"));
  return out;
}

inline std::string run_report(const ExperimentConfig& cfg) {
  const MetricsReport m = metrics_from_json(detail::read_json(detail::require_artifact(cfg, "report", artifact::metrics)));
  const std::string csv = report_csv(m);
  detail::write_text(detail::out_path(cfg, artifact::report), csv);
  return csv;
}

/// Copy of `cfg` with one sweep axis set to `value`.
inline ExperimentConfig apply_sweep_value(ExperimentConfig cfg, const std::string& axis, const nlohmann::json& value) {
  try {
    if (axis == "end_ratio") {
      cfg.schedule.end_ratio = value.get<double>();
    } else if (axis == "rank") {
      cfg.construction.rank = value.get<std::size_t>();
    } else if (axis == "group_size") {
      cfg.grouping.group_size = value.get<std::size_t>();
    } else if (axis == "selection_method") {
      cfg.selection.method = selection_method_from_string(value.get<std::string>());
    } else if (axis == "grouping_method") {
      cfg.grouping.method = grouping_method_from_string(value.get<std::string>());
    } else if (axis == "calib_tokens") {
      cfg.calibration.tokens = value.get<std::size_t>();
    } else if (axis == "max_delta") {
      cfg.selection.threshold.max_delta = detail::parse_max_delta(value);
    } else if (axis == "schedule") {
      cfg.schedule.kind = schedule_kind_from_string(value.get<std::string>());
    } else {
      throw ConfigError("unknown sweep axis '" + axis + "'");
    }
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("sweep value " + value.dump() + " has the wrong type for axis " + axis);
  }
  cfg.validate();
  return cfg;
}

inline std::string sweep_value_label(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return detail::fmt(v.get<double>());
  return v.dump();
}

struct SweepResult {
  std::string table;    // one row per (value, seed)
  std::string summary;  // mean and stdev rows per value
};

/// Pretrains once per seed, then runs every sweep value on that model.
inline SweepResult sweep(const ExperimentConfig& cfg) {
  if (cfg.sweep.axis.empty() || cfg.sweep.values.empty()) throw ConfigError("sweep needs an axis and values");
  const std::vector<std::uint64_t> seeds = cfg.sweep.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.sweep.seeds;
  std::vector<std::vector<MetricsReport>> by_value(cfg.sweep.values.size());
  std::vector<std::vector<double>> walls(cfg.sweep.values.size());
  SweepResult res;
  res.table = std::string(kReportCsvHeader) + "\n";
  for (std::uint64_t seed : seeds) {
    ExperimentConfig base = cfg;
    base.seed = seed;
    const Model pretrained = pretrain_model(base).model;
    for (std::size_t v = 0; v < cfg.sweep.values.size(); ++v) {
      const ExperimentConfig c = apply_sweep_value(base, cfg.sweep.axis, cfg.sweep.values[v]);
      PhaseClock clock(c.record_wall_time);
      const RunOutcome r = run_from_pretrained(pretrained, c);
      const double wall = clock.ms();
      res.table += detail::csv_row("recovered", std::to_string(seed), sweep_value_label(cfg.sweep.values[v]),
                                   r.metrics.rho, r.metrics.recovered, wall);
      by_value[v].push_back(r.metrics);
      walls[v].push_back(wall);
    }
  }
  res.summary = std::string(kReportCsvHeader) + "\n";
  for (std::size_t v = 0; v < cfg.sweep.values.size(); ++v) {
    auto stats = [&](auto get) {
      double mean = 0.0, var = 0.0;
      const auto& rs = by_value[v];
      for (const auto& r : rs) mean += get(r);
      mean /= static_cast<double>(rs.size());
      for (const auto& r : rs) var += (get(r) - mean) * (get(r) - mean);
      const double sd = rs.size() > 1 ? std::sqrt(var / static_cast<double>(rs.size() - 1)) : 0.0;
      return std::pair{mean, sd};
    };
    const auto rho = stats([](const MetricsReport& r) { return *r.rho; });
    const auto loss = stats([](const MetricsReport& r) { return r.recovered->loss; });
    const auto acc = stats([](const MetricsReport& r) { return r.recovered->accuracy; });
    double wmean = 0.0;
    for (double w : walls[v]) wmean += w;
    wmean /= static_cast<double>(walls[v].size());
    const std::string label = sweep_value_label(cfg.sweep.values[v]);
    const bool classify = by_value[v].front().recovered->accuracy >= 0.0;
    EvalMetrics mean_m{loss.first, classify ? acc.first : -1.0, 0};
    EvalMetrics sd_m{loss.second, classify ? acc.second : -1.0, 0};
    res.summary += detail::csv_row("mean", "", label, rho.first, mean_m, wmean);
    res.summary += detail::csv_row("stdev", "", label, rho.second, sd_m, 0.0);
  }
  return res;
}

inline SweepResult run_sweep(const ExperimentConfig& cfg) {
  detail::ensure_output_dir(cfg);
  const SweepResult r = sweep(cfg);
  detail::write_text(detail::out_path(cfg, artifact::sweep), r.table);
  detail::write_text(detail::out_path(cfg, artifact::sweep_summary), r.summary);
  return r;
}

}  // namespace moerepl
