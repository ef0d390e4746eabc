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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/calibration.hpp"
#include "moerepl/construction.hpp"
#include "moerepl/errors.hpp"
#include "moerepl/grouping.hpp"
#include "moerepl/model.hpp"
#include "moerepl/optimizer.hpp"
#include "moerepl/schedule.hpp"
#include "moerepl/selection.hpp"
#include "moerepl/tasks.hpp"

namespace moerepl {

enum class SelectionMethod { adaptive, uniform, average };
enum class GroupingMethod { dominant, kmeans };

inline SelectionMethod selection_method_from_string(const std::string& s) {
  if (s == "adaptive") return SelectionMethod::adaptive;
  if (s == "uniform") return SelectionMethod::uniform;
  if (s == "average") return SelectionMethod::average;
  throw ConfigError("unknown selection method '" + s + "'");
}
inline const char* to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::adaptive: return "adaptive";
    case SelectionMethod::uniform: return "uniform";
    case SelectionMethod::average: return "average";
  }
  return "?";
}

inline GroupingMethod grouping_method_from_string(const std::string& s) {
  if (s == "dominant") return GroupingMethod::dominant;
  if (s == "kmeans") return GroupingMethod::kmeans;
  throw ConfigError("unknown grouping method '" + s + "'");
}
inline const char* to_string(GroupingMethod m) { return m == GroupingMethod::dominant ? "dominant" : "kmeans"; }

struct CalibrationConfig {
  std::size_t tokens = 131072;
  std::size_t batch_tokens = 1024;
  ScoreMode score_mode = ScoreMode::post_topk;
  NormMode norm_mode = NormMode::gate_probs;
};

struct SelectionConfig {
  SelectionMethod method = SelectionMethod::adaptive;
  ThresholdConfig threshold{};
  bool cap = true;  // at most N - top_k candidates per layer
  std::optional<double> target_rho;
  double search_tol = 0.02;
};

struct GroupingConfig {
  GroupingMethod method = GroupingMethod::dominant;
  std::size_t group_size = 3;
  SimilarityMode similarity = SimilarityMode::router_columns;
};

struct ConstructionConfig {
  std::size_t rank = 1;
  bool retained_adapters = true;
  ReplaceMode replace_mode = ReplaceMode::shared;
};

struct PhaseConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 32;
  AdamWConfig optimizer{};
  double load_balance = 0.0;  // pretraining only
};

struct EvalConfig {
  std::size_t tokens = 4096;
  std::size_t batch_tokens = 1024;
};

struct SweepConfig {
  std::string axis;
  std::vector<nlohmann::json> values;
  std::vector<std::uint64_t> seeds;
};

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"end_ratio", "rank",     "group_size", "selection_method",
                                                "grouping_method", "calib_tokens", "max_delta", "schedule"};
  return axes;
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  ModelHyper model{};
  TaskSpec task{};
  bool task_seed_explicit = false;  // otherwise the task seed follows `seed`
  CalibrationConfig calibration{};
  SelectionConfig selection{};
  GroupingConfig grouping{};
  ConstructionConfig construction{};
  AnnealSchedule schedule{};
  PhaseConfig pretrain{3000, 32, AdamWConfig{3e-3}};
  PhaseConfig finetune{2000, 32, AdamWConfig{1e-4}};
  EvalConfig eval{};
  SweepConfig sweep{};
  std::string output_dir = "out";
  bool record_wall_time = false;

  TaskSpec resolved_task() const {
    TaskSpec t = task;
    if (!task_seed_explicit) t.seed = seed;
    t.input_dim = model.input_dim;
    t.output_dim = model.output_dim;
    return t;
  }

  void validate() const {
    model.validate();
    resolved_task().validate();
    if (calibration.tokens == 0 || calibration.batch_tokens == 0) throw ConfigError("calibration budget must be positive");
    selection.threshold.validate();
    if (selection.target_rho && !(*selection.target_rho >= 0.0 && *selection.target_rho < 1.0))
      throw ConfigError("selection.target_rho must be in [0, 1)");
    if (!(selection.search_tol > 0.0)) throw ConfigError("selection.search_tol must be positive");
    if (grouping.group_size == 0) throw ConfigError("grouping.group_size must be >= 1");
    if (construction.rank == 0 || construction.rank > std::min(model.d_model, model.d_hidden))
      throw ConfigError("construction.rank must be in [1, min(d_model, d_hidden)]");
    AnnealSchedule s = schedule;
    s.total_steps = std::max<std::size_t>(finetune.steps, 1);
    s.validate();
    for (const PhaseConfig* p : {&pretrain, &finetune}) {
      if (p->batch_size == 0) throw ConfigError("batch_size must be positive");
      if (!(p->optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
      if (!(p->load_balance >= 0.0)) throw ConfigError("load_balance must be >= 0");
    }
    if (eval.tokens == 0 || eval.batch_tokens == 0) throw ConfigError("eval budget must be positive");
    if (!sweep.axis.empty() &&
        std::find(sweep_axes().begin(), sweep_axes().end(), sweep.axis) == sweep_axes().end())
      throw ConfigError("unknown sweep axis '" + sweep.axis + "'");
  }
};

namespace detail {

// Reads one JSON object, rejecting keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  template <class V, class Parse>
  void get_as(const std::string& key, V& out, Parse parse) {
    std::string s;
    seen_.insert(key);
    if (!j_.contains(key)) return;
    get(key, s);
    out = parse(s);
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("unknown config key '" + where(it.key()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_optimizer(const nlohmann::json& j, const std::string& path, AdamWConfig& o) {
  StrictObject s(j, path);
  s.get("lr", o.lr);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("eps", o.eps);
  s.get("weight_decay", o.weight_decay);
  s.finish();
}

inline void read_phase(const nlohmann::json& j, const std::string& path, PhaseConfig& p) {
  StrictObject s(j, path);
  s.get("steps", p.steps);
  s.get("batch_size", p.batch_size);
  if (path == "pretrain") s.get("load_balance", p.load_balance);
  if (auto* o = s.sub("optimizer")) read_optimizer(*o, path + ".optimizer", p.optimizer);
  s.finish();
}

inline double parse_max_delta(const nlohmann::json& v) {
  if (v.is_string() && v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  if (v.is_number()) return v.get<double>();
  throw ConfigError("max_delta must be a number or \"inf\"");
}

inline nlohmann::json optimizer_json(const AdamWConfig& o) {
  return {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay}};
}

inline nlohmann::json phase_json(const PhaseConfig& p, bool with_balance) {
  nlohmann::json j = {{"steps", p.steps}, {"batch_size", p.batch_size}, {"optimizer", optimizer_json(p.optimizer)}};
  if (with_balance) j["load_balance"] = p.load_balance;
  return j;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::StrictObject;
  ExperimentConfig c;
  StrictObject root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  root.get("record_wall_time", c.record_wall_time);
  if (auto* m = root.sub("model")) {
    StrictObject s(*m, "model");
    s.get("input_dim", c.model.input_dim);
    s.get("output_dim", c.model.output_dim);
    s.get("d_model", c.model.d_model);
    s.get("d_hidden", c.model.d_hidden);
    s.get("num_experts", c.model.num_experts);
    s.get("top_k", c.model.top_k);
    s.get("num_layers", c.model.num_layers);
    s.finish();
  }
  if (auto* t = root.sub("task")) {
    StrictObject s(*t, "task");
    s.get_as("kind", c.task.kind, task_kind_from_string);
    s.get("num_modes", c.task.num_modes);
    s.get("mode_skew", c.task.mode_skew);
    s.get("noise_std", c.task.noise_std);
    s.get("input_spread", c.task.input_spread);
    c.task_seed_explicit = s.has("seed");
    s.get("seed", c.task.seed);
    s.finish();
  }
  if (auto* t = root.sub("calibration")) {
    StrictObject s(*t, "calibration");
    s.get("tokens", c.calibration.tokens);
    s.get("batch_tokens", c.calibration.batch_tokens);
    s.get_as("score_mode", c.calibration.score_mode, score_mode_from_string);
    s.get_as("norm_mode", c.calibration.norm_mode, norm_mode_from_string);
    s.finish();
  }
  if (auto* t = root.sub("selection")) {
    StrictObject s(*t, "selection");
    s.get_as("method", c.selection.method, selection_method_from_string);
    s.get("base_threshold", c.selection.threshold.base_threshold);
    s.get("alpha", c.selection.threshold.alpha);
    if (auto* md = s.sub("max_delta")) c.selection.threshold.max_delta = detail::parse_max_delta(*md);
    s.get("cap", c.selection.cap);
    if (auto* tr = s.sub("target_rho"); tr && !tr->is_null()) {
      if (!tr->is_number()) throw ConfigError("selection.target_rho must be a number or null");
      c.selection.target_rho = tr->get<double>();
    }
    s.get("search_tol", c.selection.search_tol);
    s.finish();
  }
  if (auto* t = root.sub("grouping")) {
    StrictObject s(*t, "grouping");
    s.get_as("method", c.grouping.method, grouping_method_from_string);
    s.get("group_size", c.grouping.group_size);
    s.get_as("similarity", c.grouping.similarity, similarity_mode_from_string);
    s.finish();
  }
  if (auto* t = root.sub("construction")) {
    StrictObject s(*t, "construction");
    s.get("rank", c.construction.rank);
    s.get("retained_adapters", c.construction.retained_adapters);
    s.get_as("replace_mode", c.construction.replace_mode, replace_mode_from_string);
    s.finish();
  }
  if (auto* t = root.sub("schedule")) {
    StrictObject s(*t, "schedule");
    s.get_as("kind", c.schedule.kind, schedule_kind_from_string);
    s.get("end_ratio", c.schedule.end_ratio);
    s.get("gamma", c.schedule.gamma);
    s.finish();
  }
  if (auto* t = root.sub("pretrain")) detail::read_phase(*t, "pretrain", c.pretrain);
  if (auto* t = root.sub("finetune")) detail::read_phase(*t, "finetune", c.finetune);
  if (auto* t = root.sub("eval")) {
    StrictObject s(*t, "eval");
    s.get("tokens", c.eval.tokens);
    s.get("batch_tokens", c.eval.batch_tokens);
    s.finish();
  }
  if (auto* t = root.sub("sweep")) {
    StrictObject s(*t, "sweep");
    s.get("axis", c.sweep.axis);
    s.get("values", c.sweep.values);
    s.get("seeds", c.sweep.seeds);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json sel = {{"method", to_string(c.selection.method)},
                        {"base_threshold", c.selection.threshold.base_threshold},
                        {"alpha", c.selection.threshold.alpha},
                        {"cap", c.selection.cap},
                        {"target_rho", c.selection.target_rho ? nlohmann::json(*c.selection.target_rho) : nlohmann::json()},
                        {"search_tol", c.selection.search_tol}};
  if (std::isfinite(c.selection.threshold.max_delta))
    sel["max_delta"] = c.selection.threshold.max_delta;
  else
    sel["max_delta"] = "inf";
  nlohmann::json task = {{"kind", to_string(c.task.kind)},        {"num_modes", c.task.num_modes},
                         {"mode_skew", c.task.mode_skew},         {"noise_std", c.task.noise_std},
                         {"input_spread", c.task.input_spread}};
  if (c.task_seed_explicit) task["seed"] = c.task.seed;
  return {
      {"seed", c.seed},
      {"model",
       {{"input_dim", c.model.input_dim},
        {"output_dim", c.model.output_dim},
        {"d_model", c.model.d_model},
        {"d_hidden", c.model.d_hidden},
        {"num_experts", c.model.num_experts},
        {"top_k", c.model.top_k},
        {"num_layers", c.model.num_layers}}},
      {"task", task},
      {"calibration",
       {{"tokens", c.calibration.tokens},
        {"batch_tokens", c.calibration.batch_tokens},
        {"score_mode", to_string(c.calibration.score_mode)},
        {"norm_mode", to_string(c.calibration.norm_mode)}}},
      {"selection", sel},
      {"grouping",
       {{"method", to_string(c.grouping.method)},
        {"group_size", c.grouping.group_size},
        {"similarity", to_string(c.grouping.similarity)}}},
      {"construction",
       {{"rank", c.construction.rank},
        {"retained_adapters", c.construction.retained_adapters},
        {"replace_mode", to_string(c.construction.replace_mode)}}},
      {"schedule",
       {{"kind", to_string(c.schedule.kind)}, {"end_ratio", c.schedule.end_ratio}, {"gamma", c.schedule.gamma}}},
      {"pretrain", detail::phase_json(c.pretrain, true)},
      {"finetune", detail::phase_json(c.finetune, false)},
      {"eval", {{"tokens", c.eval.tokens}, {"batch_tokens", c.eval.batch_tokens}}},
      {"sweep", {{"axis", c.sweep.axis}, {"values", c.sweep.values}, {"seeds", c.sweep.seeds}}},
      {"output_dir", c.output_dir},
      {"record_wall_time", c.record_wall_time}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace moerepl
