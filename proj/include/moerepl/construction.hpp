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

// Hierarchical expert construction: gate-weighted shared bases per group,
// low-rank adapters per replaced expert, and expert-parameter accounting.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/calibration.hpp"
#include "moerepl/grouping.hpp"
#include "moerepl/model.hpp"
#include "moerepl/random.hpp"
#include "moerepl/selection.hpp"

namespace moerepl {

/// W_share = sum(G_i W_i) / sum(G_i) per weight matrix. Members are summed in
/// ascending id order so the result does not depend on input order. Falls
/// back to uniform weights when every member score is zero.
template <std::floating_point T>
SharedBase<T> build_shared_base(std::vector<std::pair<std::size_t, const ExpertParams<T>*>> members,
                                const std::vector<double>& scores, std::size_t group_id = 0) {
  MOEREPL_REQUIRE(!members.empty(), "shared base needs at least one member");
  std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double total = 0.0;
  for (const auto& [id, p] : members) {
    MOEREPL_REQUIRE(id < scores.size(), "member id out of range");
    MOEREPL_REQUIRE(scores[id] >= 0.0, "gate scores must be non-negative");
    total += scores[id];
  }
  const bool uniform = total <= 0.0;
  auto average = [&](auto pick) {
    const Matrix<T>& first = pick(*members.front().second);
    std::vector<double> acc(first.size(), 0.0);
    for (const auto& [id, p] : members) {
      const Matrix<T>& w = pick(*p);
      MOEREPL_REQUIRE(w.same_shape(first), "group members must share weight shapes");
      const double weight = uniform ? 1.0 / static_cast<double>(members.size()) : scores[id] / total;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += weight * static_cast<double>(w.data()[k]);
    }
    Matrix<T> out(first.rows(), first.cols());
    for (std::size_t k = 0; k < acc.size(); ++k) {
      // Clamp into the members' range so the float result stays a convex combination.
      T lo = pick(*members.front().second).data()[k], hi = lo;
      for (const auto& [id, p] : members) {
        lo = std::min(lo, pick(*p).data()[k]);
        hi = std::max(hi, pick(*p).data()[k]);
      }
      out.data()[k] = std::clamp(static_cast<T>(acc[k]), lo, hi);
    }
    return out;
  };
  SharedBase<T> base;
  base.w_in_share = average([](const ExpertParams<T>& e) -> const Matrix<T>& { return e.w_in; });
  base.w_out_share = average([](const ExpertParams<T>& e) -> const Matrix<T>& { return e.w_out; });
  for (const auto& [id, p] : members) base.member_ids.push_back(id);
  base.group_id = group_id;
  return base;
}

/// a ~ N(0, 1/r) of shape r x m, b = 0 of shape n x r, so b*a = 0.
template <std::floating_point T>
LowRankAdapter<T> init_adapter(std::size_t n, std::size_t m, std::size_t r, RandomSource& rng) {
  if (r < 1 || r > std::min(n, m))
    throw ContractError("adapter rank " + std::to_string(r) + " outside [1, min(n, m)]");
  LowRankAdapter<T> ad;
  ad.a = rng.normal_matrix<T>(r, m, 1.0 / std::sqrt(static_cast<double>(r)));
  ad.b = Matrix<T>(n, r);
  return ad;
}

/// Expert parameters of one n x m matrix position across a layer after compression:
/// (N - N' + M) * n * m + N' * r * (n + m).
inline std::uint64_t compressed_matrix_params(std::uint64_t n, std::uint64_t m, std::uint64_t experts,
                                              std::uint64_t replaced, std::uint64_t groups, std::uint64_t rank) {
  MOEREPL_REQUIRE(groups <= replaced && replaced <= experts, "need M <= N' <= N");
  return (experts - replaced + groups) * n * m + replaced * rank * (n + m);
}

/// rho = 1 - ((N - N' + M) n m + N' r (n + m)) / (N n m).
inline double compression_ratio(std::uint64_t n, std::uint64_t m, std::uint64_t experts, std::uint64_t replaced,
                                std::uint64_t groups, std::uint64_t rank) {
  MOEREPL_REQUIRE(experts > 0 && n > 0 && m > 0, "compression_ratio needs positive sizes");
  const std::uint64_t before = experts * n * m;
  const std::uint64_t after = compressed_matrix_params(n, m, experts, replaced, groups, rank);
  return 1.0 - static_cast<double>(after) / static_cast<double>(before);
}

struct LayerCompression {
  std::size_t experts = 0;   // N
  std::size_t replaced = 0;  // N'
  std::size_t groups = 0;    // M
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t rank = 0;
  std::uint64_t params_before = 0;
  std::uint64_t params_after = 0;
  double rho = 0.0;
};

struct CompressionReport {
  std::vector<LayerCompression> layers;
  std::uint64_t expert_param_count_before = 0;
  std::uint64_t expert_param_count_after = 0;
  double rho = 0.0;
};

/// Accounting over both expert matrices (d x h and h x d) of every layer.
/// `groups[j]` is M for layer j; adapter-only replacement uses M = 0.
inline CompressionReport compression_report(const ModelHyper& hyper, const std::vector<std::size_t>& replaced,
                                            const std::vector<std::size_t>& groups, std::size_t rank) {
  MOEREPL_REQUIRE(replaced.size() == groups.size(), "replaced/groups size mismatch");
  CompressionReport rep;
  const std::uint64_t d = hyper.d_model, h = hyper.d_hidden, N = hyper.num_experts;
  for (std::size_t j = 0; j < replaced.size(); ++j) {
    LayerCompression lc;
    lc.experts = hyper.num_experts;
    lc.replaced = replaced[j];
    lc.groups = groups[j];
    lc.n = hyper.d_model;
    lc.m = hyper.d_hidden;
    lc.rank = replaced[j] == 0 ? 0 : rank;
    const std::uint64_t r = lc.rank;
    lc.params_before = N * d * h + N * h * d;
    lc.params_after = compressed_matrix_params(d, h, N, replaced[j], groups[j], r) +
                      compressed_matrix_params(h, d, N, replaced[j], groups[j], r);
    lc.rho = 1.0 - static_cast<double>(lc.params_after) / static_cast<double>(lc.params_before);
    rep.expert_param_count_before += lc.params_before;
    rep.expert_param_count_after += lc.params_after;
    rep.layers.push_back(lc);
  }
  rep.rho = rep.expert_param_count_before == 0
                ? 0.0
                : 1.0 - static_cast<double>(rep.expert_param_count_after) /
                            static_cast<double>(rep.expert_param_count_before);
  return rep;
}

inline nlohmann::json report_to_json(const CompressionReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"N", l.experts}, {"N_replaced", l.replaced}, {"M", l.groups}, {"n", l.n}, {"m", l.m},
                      {"r", l.rank}, {"expert_param_count_before", l.params_before},
                      {"expert_param_count_after", l.params_after}, {"rho", l.rho}});
  return {{"layers", layers},
          {"expert_param_count_before", r.expert_param_count_before},
          {"expert_param_count_after", r.expert_param_count_after},
          {"rho", r.rho}};
}

inline CompressionReport report_from_json(const nlohmann::json& j) {
  try {
    CompressionReport r;
    for (const auto& l : j.at("layers")) {
      LayerCompression lc;
      lc.experts = l.at("N");
      lc.replaced = l.at("N_replaced");
      lc.groups = l.at("M");
      lc.n = l.at("n");
      lc.m = l.at("m");
      lc.rank = l.at("r");
      lc.params_before = l.at("expert_param_count_before");
      lc.params_after = l.at("expert_param_count_after");
      lc.rho = l.at("rho");
      r.layers.push_back(lc);
    }
    r.expert_param_count_before = j.at("expert_param_count_before");
    r.expert_param_count_after = j.at("expert_param_count_after");
    r.rho = j.at("rho");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed compression report: ") + e.what());
  }
}

/// CSV header and row: N,N_replaced,M,r,before,after,rho (totals).
inline std::string report_csv_header() { return "experts,replaced,groups,rank,params_before,params_after,rho"; }

inline std::string report_csv_row(const CompressionReport& r) {
  std::size_t experts = 0, replaced = 0, groups = 0, rank = 0;
  for (const auto& l : r.layers) {
    experts += l.experts;
    replaced += l.replaced;
    groups += l.groups;
    rank = std::max(rank, l.rank);
  }
  char rho[64];
  std::snprintf(rho, sizeof rho, "%.9g", r.rho);
  return std::to_string(experts) + "," + std::to_string(replaced) + "," + std::to_string(groups) + "," +
         std::to_string(rank) + "," + std::to_string(r.expert_param_count_before) + "," +
         std::to_string(r.expert_param_count_after) + "," + rho;
}

enum class ReplaceMode { shared, adapter_only };

inline ReplaceMode replace_mode_from_string(const std::string& s) {
  if (s == "shared") return ReplaceMode::shared;
  if (s == "adapter_only") return ReplaceMode::adapter_only;
  throw ConfigError("unknown replace mode '" + s + "'");
}
inline const char* to_string(ReplaceMode m) { return m == ReplaceMode::shared ? "shared" : "adapter_only"; }

struct AssembleOptions {
  std::size_t rank = 1;
  bool attach_retained_adapters = true;
  ReplaceMode replace_mode = ReplaceMode::shared;
  std::uint64_t seed = 0;
};

template <std::floating_point T>
struct AssembledModel {
  MoEModel<T> model;
  CompressionReport report;
};

namespace detail {

template <std::floating_point T>
AdapterPair<T> make_adapter_pair(const ModelHyper& h, std::size_t rank, std::uint64_t seed, std::size_t layer,
                                 std::size_t expert) {
  RandomSource rin(derive_seed(seed, {0x61646170ULL, layer, expert, 0}));
  RandomSource rout(derive_seed(seed, {0x61646170ULL, layer, expert, 1}));
  return AdapterPair<T>{init_adapter<T>(h.d_model, h.d_hidden, rank, rin),
                        init_adapter<T>(h.d_hidden, h.d_model, rank, rout)};
}

}  // namespace detail

/// Rewires every candidate expert to (frozen original, its group's shared
/// base, fresh adapter) and optionally attaches zero-product adapters to the
/// retained experts. beta is reset to 1, so the assembled model computes the
/// same function as `model`.
template <std::floating_point T>
AssembledModel<T> assemble_compressed_model(const MoEModel<T>& model, const SelectionPlan& plan,
                                            const GroupAssignment& groups, const GateScoreTable& scores,
                                            const AssembleOptions& opt) {
  const std::size_t L = model.layers.size();
  if (plan.layers.size() != L || groups.layers.size() != L || scores.scores.size() != L)
    throw ContractError("plan/groups/scores do not match the model's layer count");
  const ModelHyper& hp = model.hyper;
  AssembledModel<T> out{model, {}};
  out.model.beta = 1.0;
  std::vector<std::size_t> replaced_count, group_count;
  for (std::size_t j = 0; j < L; ++j) {
    MoELayer<T>& layer = out.model.layers[j];
    MOEREPL_REQUIRE(layer.bases.empty(), "model is already compressed");
    const auto& cand = plan.layers[j].candidate_ids;
    std::set<std::size_t> cand_set(cand.begin(), cand.end());
    if (cand_set.size() != cand.size()) throw ContractError("duplicate candidate in layer " + std::to_string(j));
    std::set<std::size_t> covered;
    for (const auto& g : groups.layers[j].groups) {
      if (std::find(g.member_ids.begin(), g.member_ids.end(), g.dominant_id) == g.member_ids.end())
        throw ContractError("group does not contain its dominant");
      for (std::size_t e : g.member_ids) {
        if (!cand_set.contains(e)) throw ContractError("group member is not a candidate");
        if (!covered.insert(e).second) throw ContractError("expert assigned to two groups");
      }
    }
    if (covered != cand_set) throw ContractError("groups do not cover the candidate set of layer " + std::to_string(j));
    for (std::size_t i : cand) {
      MOEREPL_REQUIRE(i < layer.experts.size(), "candidate id out of range");
      MOEREPL_REQUIRE(layer.experts[i].form == ExpertForm::dense && layer.experts[i].weights,
                      "candidate expert must be dense");
    }

    if (opt.replace_mode == ReplaceMode::shared) {
      for (std::size_t g = 0; g < groups.layers[j].groups.size(); ++g) {
        std::vector<std::pair<std::size_t, const ExpertParams<T>*>> members;
        for (std::size_t e : groups.layers[j].groups[g].member_ids)
          members.emplace_back(e, &*model.layers[j].experts[e].weights);
        layer.bases.push_back(build_shared_base(members, scores.scores[j], g));
        for (std::size_t e : groups.layers[j].groups[g].member_ids) layer.experts[e].group = static_cast<int>(g);
      }
    }
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
      ExpertSlot<T>& slot = layer.experts[i];
      if (cand_set.contains(i)) {
        slot.adapter = detail::make_adapter_pair<T>(hp, opt.rank, opt.seed, j, i);
        if (opt.replace_mode == ReplaceMode::shared) {
          slot.form = ExpertForm::replaced;
        } else {
          slot.form = ExpertForm::adapter_only;
          slot.weights.reset();
          slot.group = -1;
        }
      } else if (opt.attach_retained_adapters && !cand.empty()) {
        slot.adapter = detail::make_adapter_pair<T>(hp, opt.rank, opt.seed, j, i);
      }
    }
    replaced_count.push_back(cand.size());
    group_count.push_back(opt.replace_mode == ReplaceMode::shared ? groups.layers[j].groups.size() : 0);
  }
  out.report = compression_report(hp, replaced_count, group_count, opt.rank);
  return out;
}

/// Ends annealing: beta is set to 0, frozen originals are dropped and retained
/// adapters are merged into their dense weights.
template <std::floating_point T>
void finalize_compression(MoEModel<T>& model) {
  model.beta = 0.0;
  for (auto& layer : model.layers) {
    for (auto& slot : layer.experts) {
      if (slot.form == ExpertForm::replaced) {
        slot.weights.reset();
      } else if (slot.form == ExpertForm::dense && slot.adapter) {
        add_inplace(slot.weights->w_in, slot.adapter->w_in.product());
        add_inplace(slot.weights->w_out, slot.adapter->w_out.product());
        slot.adapter.reset();
      }
    }
  }
}

/// Parameters held by experts, bases and adapters (routers excluded). Frozen
/// originals are annealing scaffolding and are excluded too.
template <std::floating_point T>
std::uint64_t expert_parameter_count(const MoEModel<T>& model) {
  std::uint64_t n = 0;
  visit_parameters(model, [&](const std::string&, const Matrix<T>& m, ParamClass c) {
    if (c == ParamClass::expert || c == ParamClass::adapter || c == ParamClass::base) n += m.size();
  });
  return n;
}

}  // namespace moerepl
