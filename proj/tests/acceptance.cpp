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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "moerepl/grad_check.hpp"
#include "moerepl/pipeline.hpp"

using namespace moerepl;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig default_config() {
  return load_config(fs::path(MOEREPL_SOURCE_DIR) / "configs" / "default.json");
}

MoEModel<double> to_double(const Model& m) {
  MoEModel<double> out;
  out.hyper = m.hyper;
  out.beta = m.beta;
  for (const auto& l : m.layers) {
    MoELayer<double> dl;
    for (const auto& s : l.experts) {
      ExpertSlot<double> ds;
      ds.form = s.form;
      ds.group = s.group;
      if (s.weights) ds.weights = ExpertParams<double>{};
      if (s.adapter) ds.adapter = AdapterPair<double>{};
      dl.experts.push_back(std::move(ds));
    }
    for (const auto& b : l.bases) {
      SharedBase<double> db;
      db.group_id = b.group_id;
      db.member_ids = b.member_ids;
      dl.bases.push_back(std::move(db));
    }
    out.layers.push_back(std::move(dl));
  }
  std::vector<const Matrix<Real>*> src;
  visit_parameters(m, [&](const std::string&, const Matrix<Real>& w, ParamClass) { src.push_back(&w); });
  std::size_t i = 0;
  visit_parameters(out, [&](const std::string&, Matrix<double>& w, ParamClass) {
    const Matrix<Real>& s = *src.at(i++);
    std::vector<double> data(s.data().begin(), s.data().end());
    w = Matrix<double>(s.rows(), s.cols(), std::move(data));
  });
  return out;
}

struct Shared {
  ExperimentConfig cfg;
  Model pretrained;
  CalibrationOutcome calib;
  CompressOutcome compressed;
  double threshold_at_half = 0.0;
};

// Criterion 1
Verdict identity_at_assembly(const Shared& s) {
  const SyntheticTask task(s.cfg.resolved_task());
  const auto& plan = s.compressed.plan;
  const auto& groups = s.compressed.groups;
  AssembleOptions opt;
  opt.rank = s.cfg.construction.rank;
  opt.attach_retained_adapters = s.cfg.construction.retained_adapters;
  opt.seed = adapter_seed(s.cfg);
  const MoEModel<double> pre64 = to_double(s.pretrained);
  const auto asm64 = assemble_compressed_model(pre64, plan, groups, s.calib.result.scores, opt).model;
  const Model& asm32 = s.compressed.assembled.model;
  double d32 = 0.0, d64 = 0.0;
  for (std::uint64_t b = 0; b * s.cfg.eval.batch_tokens < s.cfg.eval.tokens; ++b) {
    const auto x32 = task.generate<Real>(Split::eval, b, s.cfg.eval.batch_tokens).inputs;
    const auto x64 = task.generate<double>(Split::eval, b, s.cfg.eval.batch_tokens).inputs;
    d32 = std::max<double>(d32, max_abs_diff(model_forward(asm32, x32), model_forward(s.pretrained, x32)));
    d64 = std::max(d64, max_abs_diff(model_forward(asm64, x64), model_forward(pre64, x64)));
  }
  return {d32 <= 1e-6 && d64 <= 1e-12, format("rho=%.4f max_abs_f32=%.3g max_abs_f64=%.3g",
                                              s.compressed.assembled.report.rho, d32, d64)};
}

// Criterion 2
Verdict removability(const Shared& s) {
  Model tuned = s.compressed.assembled.model;
  finetune(tuned, SyntheticTask(s.cfg.resolved_task()), finetune_options(s.cfg), s.cfg.finetune.steps);
  const double deleted = evaluate_model(tuned, s.cfg).loss;
  Model restored = tuned, zeroed = tuned;
  std::size_t replaced = 0;
  for (std::size_t j = 0; j < tuned.layers.size(); ++j)
    for (std::size_t i = 0; i < tuned.layers[j].experts.size(); ++i) {
      if (tuned.layers[j].experts[i].form != ExpertForm::replaced) continue;
      const auto& w = *s.pretrained.layers[j].experts[i].weights;
      restored.layers[j].experts[i].weights = w;
      zeroed.layers[j].experts[i].weights =
          ExpertParams<Real>{Matrix<Real>(w.w_in.rows(), w.w_in.cols()), Matrix<Real>(w.w_out.rows(), w.w_out.cols())};
      ++replaced;
    }
  const double with_orig = evaluate_model(restored, s.cfg).loss;
  const double with_zero = evaluate_model(zeroed, s.cfg).loss;
  return {tuned.beta == 0.0 && replaced > 0 && with_orig == deleted && with_zero == deleted,
          format("beta=%g replaced=%zu loss deleted=%.9g originals=%.9g zeroed=%.9g", tuned.beta, replaced, deleted,
                 with_orig, with_zero)};
}

std::uint64_t walk_expert_params(const Checkpoint& ck) {
  std::uint64_t n = 0;
  for (const auto& t : ck.tensors) {
    const bool expertish = t.name.find(".experts.") != std::string::npos || t.name.find(".bases.") != std::string::npos;
    if (expertish && t.name.find(".original.") == std::string::npos) n += t.element_count();
  }
  return n;
}

// Criterion 3
Verdict ratio_exactness() {
  RandomSource rng(31);
  std::size_t configs = 0, bad = 0;
  for (int rep = 0; rep < 40; ++rep) {
    ModelHyper h;
    h.input_dim = 3;
    h.output_dim = 2;
    h.num_experts = 2 + rng.below(15);
    h.top_k = 1;
    h.num_layers = 1;
    h.d_model = 1 + rng.below(12);
    h.d_hidden = 1 + rng.below(12);
    const std::size_t N = h.num_experts, Np = rng.below(N + 1);
    const std::size_t M = Np == 0 ? 0 : 1 + rng.below(Np);
    const std::size_t r = 1 + rng.below(std::min(h.d_model, h.d_hidden));
    const auto model = init_model<Real>(h, 100 + rep);
    GateScoreTable scores;
    scores.scores = {std::vector<double>(N, 1.0 / static_cast<double>(N))};
    scores.token_count = 1;
    SelectionPlan plan;
    LayerSelection sel;
    for (std::size_t e = 0; e < Np; ++e) sel.candidate_ids.push_back(e);
    plan.layers.push_back(sel);
    GroupAssignment groups;
    groups.layers.emplace_back();
    for (std::size_t g = 0; g < M; ++g) groups.layers[0].groups.push_back(Group{g, {}});
    for (std::size_t e = 0; e < Np; ++e) groups.layers[0].groups[e % M].member_ids.push_back(e);
    auto out = assemble_compressed_model(model, plan, groups, scores, AssembleOptions{r, true, ReplaceMode::shared, 5});
    finalize_compression(out.model);
    const std::uint64_t before = walk_expert_params(to_checkpoint(model));
    const std::uint64_t after = walk_expert_params(to_checkpoint(out.model));
    const std::uint64_t n = h.d_model, m = h.d_hidden;
    const double rho = compression_ratio(n, m, N, Np, M, r);
    const bool ok = before == 2 * N * n * m && after == 2 * compressed_matrix_params(n, m, N, Np, M, r) &&
                    rho == 1.0 - static_cast<double>(after) / static_cast<double>(before) &&
                    out.report.rho == rho && out.report.expert_param_count_after == after;
    ++configs;
    bad += !ok;
  }
  return {configs >= 20 && bad == 0, format("%zu configurations, %zu mismatches", configs, bad)};
}

// Criterion 4
Verdict gradient_fidelity(const Shared& s) {
  const SyntheticTask task(s.cfg.resolved_task());
  MoEModel<double> m = to_double(s.pretrained);
  const auto set = make_calibration_set<double>(task, 4096, 1024);
  const auto calib = calibrate(m, set);
  const ExperimentConfig& cfg = s.cfg;
  const auto plan = select_at(calib, cfg, s.threshold_at_half);
  const auto groups = dominant_group(m, &set, plan, calib.scores, cfg.grouping.group_size);
  AssembleOptions opt;
  opt.rank = 2;
  m = assemble_compressed_model(m, plan, groups, calib.scores, opt).model;
  RandomSource rng(41);
  for (auto& l : m.layers)
    for (auto& e : l.experts)
      if (e.adapter) {
        e.adapter->w_in.b = rng.normal_matrix<double>(e.adapter->w_in.b.rows(), e.adapter->w_in.b.cols(), 0.1);
        e.adapter->w_out.b = rng.normal_matrix<double>(e.adapter->w_out.b.rows(), e.adapter->w_out.b.cols(), 0.1);
      }
  m.beta = 0.5;
  TrainableMask mask;
  visit_parameters(m, [&](const std::string& name, const Matrix<double>&, ParamClass c) {
    if (c == ParamClass::router || c == ParamClass::expert || c == ParamClass::adapter || c == ParamClass::base)
      mask.insert(name);
  });
  const auto batch = task.generate<double>(Split::train, 7, 32);
  auto loss = [&](ad::Tape<double>& t, const MoEModel<double>& p, const TrainableMask& mk) {
    return record_loss(t, p, batch, mk);
  };
  GradCheckOptions o;
  o.probes = 64;
  o.h = 1e-5;
  const auto rep = grad_check(m, mask, loss, o);
  std::string classes;
  for (const auto& [k, v] : rep.probes_per_class) classes += format("%s:%zu ", k.c_str(), v);
  return {rep.max_relative_error < 1e-4 && rep.probes_per_class.size() == 4,
          format("max_rel=%.3g worst=%s probes %s", rep.max_relative_error, rep.worst_parameter_id.c_str(),
                 classes.c_str())};
}

// Criterion 5
Verdict schedule_correctness() {
  const double T = 1000.0;
  std::size_t violations = 0;
  for (double eps : {0.1, 0.2, 0.3, 0.4, 0.5}) {
    for (double gamma : {0.0, 1.0, 3.0, 5.0}) {
      auto beta = [&](double t) { return gamma == 0.0 ? beta_linear(t, T, eps) : beta_exponential(t, T, eps, gamma); };
      violations += beta(0.0) != 1.0;
      violations += beta(eps * T) != 0.0;
      double prev = beta(0.0);
      for (int i = 1; i < 1000; ++i) {
        const double b = beta(T * i / 999.0);
        violations += b > prev || b < 0.0;
        prev = b;
      }
    }
  }
  const double lin = beta_linear(0.2 * T, T, 0.4);
  const double expo = beta_exponential(0.5 * 0.4 * T, T, 0.4, 1.0);
  return {violations == 0 && lin == 0.5 && std::abs(expo - 0.37754) <= 1e-5,
          format("violations=%zu linear=%.6f exponential=%.6f", violations, lin, expo)};
}

// Criterion 6
Verdict selection_properties() {
  RandomSource rng(6);
  std::size_t bad = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t L = 4, N = 8;
    GateScoreTable t;
    for (std::size_t j = 0; j < L; ++j) {
      std::vector<double> v(N);
      double z = 0.0;
      for (auto& x : v) z += (x = std::exp(2.0 * rng.normal()));
      for (auto& x : v) x /= z;
      t.scores.push_back(v);
    }
    t.token_count = 1;
    std::vector<double> lo(L), hi(L), raw(L);
    for (std::size_t j = 0; j < L; ++j) {
      lo[j] = rng.uniform() * 0.9;
      hi[j] = std::min(0.99, lo[j] + rng.uniform() * 0.3);
      raw[j] = 0.1 + 2.0 * rng.uniform();
    }
    const auto a = select_candidates(t, lo), b = select_candidates(t, hi);
    for (std::size_t j = 0; j < L; ++j) {
      const auto& ca = a.layers[j].candidate_ids;
      const auto& cb = b.layers[j].candidate_ids;
      for (std::size_t i : ca) bad += std::find(cb.begin(), cb.end(), i) == cb.end();
      double cum = 0.0, top = 0.0;
      for (std::size_t i : cb) {
        cum += t.scores[j][i];
        top = std::max(top, t.scores[j][i]);
      }
      if (!cb.empty()) bad += cum < hi[j] - 1e-12 || cum - top >= hi[j];
    }
    const double p = 0.05 + 0.9 * rng.uniform(), delta = 0.5 * rng.uniform();
    const auto prof = make_router_norm_profile(raw);
    for (double v : adaptive_thresholds(prof, ThresholdConfig{p, 0.3, delta}))
      bad += v < (1.0 - delta) * p - 1e-15 || v > (1.0 + delta) * p + 1e-15;
    const auto zero = select_candidates(t, adaptive_thresholds(prof, ThresholdConfig{p, 0.3, 0.0}));
    const auto uni = uniform_select(t, p);
    for (std::size_t j = 0; j < L; ++j) bad += zero.layers[j].candidate_ids != uni.layers[j].candidate_ids;
  }
  return {bad == 0, format("100 tables, %zu violations", bad)};
}

// Criterion 7
Verdict threshold_search(Shared& s) {
  std::string detail;
  bool ok = true;
  for (double target : {0.3, 0.4, 0.5}) {
    try {
      const auto r = search_threshold(s.calib.result, s.cfg, target, 0.02);
      ok = ok && std::abs(r.achieved_rho - target) <= 0.02;
      detail += format("%.1f->%.4f (p=%.4f, %zu probes) ", target, r.achieved_rho, r.base_threshold, r.probes.size());
      if (target == 0.5) s.threshold_at_half = r.base_threshold;
    } catch (const InfeasibleTargetError& e) {
      detail += format("%.1f infeasible (max %.4f at p=%.3f) ", target, e.max_achievable(), e.threshold_at_max());
    }
  }
  return {ok, detail};
}

struct SeedRun {
  double annealed = 0.0, direct = 0.0;
  double spike_annealed = 0.0, spike_direct = 0.0;
  double step0 = 0.0, pre = 0.0;
};

std::vector<SeedRun> recovery_runs;

double max_first(const std::vector<double>& v, std::size_t n) {
  return *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
}

// Criterion 8
Verdict annealing_beats_direct(const Shared& s) {
  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig cfg = s.cfg;
    cfg.seed = seed;
    cfg.selection.target_rho = 0.5;
    const Model pre = seed == s.cfg.seed ? s.pretrained : pretrain_model(cfg).model;
    const CalibrationOutcome calib = calibrate_model(pre, cfg);
    SeedRun r;
    r.pre = evaluate_model(pre, cfg).loss;
    for (double eps : {0.2, 0.0}) {
      cfg.schedule.end_ratio = eps;
      const RunOutcome out = run_from_pretrained(pre, cfg, &calib);
      (eps > 0.0 ? r.annealed : r.direct) = out.metrics.recovered->loss;
      (eps > 0.0 ? r.spike_annealed : r.spike_direct) = max_first(out.trace.loss, 20);
      if (eps > 0.0) r.step0 = out.trace.step0_eval_loss;
    }
    wins += r.annealed <= r.direct;
    detail += format("s%llu %.5f/%.5f ", static_cast<unsigned long long>(seed), r.annealed, r.direct);
    recovery_runs.push_back(r);
  }
  return {wins >= 4, format("%zu/5 seeds; eval loss eps0.2/eps0: %s", wins, detail.c_str())};
}

// Criterion 9
Verdict loss_spike() {
  std::size_t spikes = 0, step0_ok = 0;
  std::string detail;
  for (const auto& r : recovery_runs) {
    spikes += r.spike_direct > r.spike_annealed;
    step0_ok += std::abs(r.step0 - r.pre) <= 1e-4;
    detail += format("%.4f/%.4f ", r.spike_direct, r.spike_annealed);
  }
  return {recovery_runs.size() == 5 && spikes >= 4 && step0_ok == recovery_runs.size(),
          format("spike %zu/5, step0 match %zu/%zu; max first-20 loss eps0/eps0.2: %s", spikes, step0_ok,
                 recovery_runs.size(), detail.c_str())};
}

// Criterion 10
Verdict calibration_saturation(const Shared& s) {
  ExperimentConfig small = s.cfg, large = s.cfg;
  small.calibration.tokens = 1 << 14;
  large.calibration.tokens = 1 << 17;
  const auto cs = calibrate_model(s.pretrained, small).result;
  const auto cl = calibrate_model(s.pretrained, large).result;
  const auto ps = select_at(cs, small, s.threshold_at_half), pl = select_at(cl, large, s.threshold_at_half);
  double worst = 1.0;
  std::string detail;
  for (std::size_t j = 0; j < pl.layers.size(); ++j) {
    const std::set<std::size_t> a(ps.layers[j].candidate_ids.begin(), ps.layers[j].candidate_ids.end());
    const std::set<std::size_t> b(pl.layers[j].candidate_ids.begin(), pl.layers[j].candidate_ids.end());
    std::size_t common = 0;
    for (std::size_t e : a) common += b.contains(e);
    const std::size_t denom = std::max(a.size(), b.size());
    const double overlap = denom == 0 ? 1.0 : static_cast<double>(common) / static_cast<double>(denom);
    worst = std::min(worst, overlap);
    detail += format("L%zu %zu/%zu ", j, common, denom);
  }
  return {worst >= 0.8, format("p=%.4f min overlap %.3f; %s", s.threshold_at_half, worst, detail.c_str())};
}

// Criterion 11
Verdict determinism(const Shared& s) {
  ExperimentConfig cfg = s.cfg;
  cfg.output_dir = (fs::temp_directory_path() / "moerepl_acceptance_det").string();
  const fs::path first = cfg.output_dir + ".first";
  fs::remove_all(cfg.output_dir);
  fs::remove_all(first);
  auto run = [&] {
    run_pretrain(cfg);
    run_calibrate(cfg);
    run_compress(cfg);
    run_finetune(cfg);
    run_eval(cfg);
    run_report(cfg);
  };
  run();
  fs::rename(cfg.output_dir, first);
  run();
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(first)) {
    ++files;
    differ += read_file_bytes(e.path()) != read_file_bytes(fs::path(cfg.output_dir) / e.path().filename());
  }
  std::size_t second = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(cfg.output_dir)) ++second;
  fs::remove_all(cfg.output_dir);
  fs::remove_all(first);
  return {files > 0 && files == second && differ == 0, format("%zu artifacts, %zu differ", files, differ)};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };

  const auto t0 = clock::now();
  Shared s;
  s.cfg = default_config();
  s.cfg.selection.target_rho = 0.5;
  s.pretrained = pretrain_model(s.cfg).model;
  s.calib = calibrate_model(s.pretrained, s.cfg);
  s.compressed = compress_model(s.pretrained, s.calib, s.cfg);
  s.threshold_at_half = s.compressed.base_threshold;
  std::printf("setup: default model pretrained, calibrated and compressed in %.1f s\n", secs(t0));

  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "identity at assembly", 10, [&] { return identity_at_assembly(s); }},
      {2, "removability", 10, [&] { return removability(s); }},
      {3, "compression ratio exactness", 5, [] { return ratio_exactness(); }},
      {4, "gradient fidelity", 30, [&] { return gradient_fidelity(s); }},
      {5, "schedule correctness", 1, [] { return schedule_correctness(); }},
      {6, "selection properties", 5, [] { return selection_properties(); }},
      {7, "threshold search", 120, [&] { return threshold_search(s); }},
      {8, "annealing beats direct replacement", 1800, [&] { return annealing_beats_direct(s); }},
      {9, "loss spike shape", 1800, [] { return loss_spike(); }},
      {10, "calibration saturation", 120, [&] { return calibration_saturation(s); }},
      {11, "determinism", 600, [&] { return determinism(s); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t = clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double elapsed = secs(t);
    const bool in_time = elapsed < c.limit_s;
    const bool pass = v.pass && in_time;
    failed += !pass;
    std::printf("criterion %2d %-36s %s  %.2f s (limit %.0f s)  %s\n", c.id, c.name, pass ? "PASS" : "FAIL", elapsed,
                c.limit_s, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
