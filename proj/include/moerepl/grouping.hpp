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

// Partitioning of each layer's candidates into groups that will share a base.
//
// Dominant grouping: the M = ceil(N'/group_size) highest-score candidates
// become dominants and every other candidate joins its most similar dominant.
// The k-means baseline clusters candidates by their mean output instead.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/calibration.hpp"
#include "moerepl/model.hpp"
#include "moerepl/random.hpp"
#include "moerepl/selection.hpp"

namespace moerepl {

struct Group {
  std::size_t dominant_id = 0;
  std::vector<std::size_t> member_ids;  // ascending, includes the dominant
};

struct LayerGroups {
  std::vector<Group> groups;
};

struct GroupAssignment {
  std::vector<LayerGroups> layers;
  std::size_t group_size_target = 3;

  std::size_t group_count(std::size_t layer) const { return layers.at(layer).groups.size(); }
};

/// Rows are all candidates of the layer (plan order), columns the dominants.
struct LayerSimilarity {
  std::vector<std::size_t> row_ids;
  std::vector<std::size_t> col_ids;
  std::vector<std::vector<double>> values;
};

using SimilarityMatrix = std::vector<LayerSimilarity>;

enum class SimilarityMode { router_columns, logit_profile };

inline SimilarityMode similarity_mode_from_string(const std::string& s) {
  if (s == "router_columns") return SimilarityMode::router_columns;
  if (s == "logit_profile") return SimilarityMode::logit_profile;
  throw ConfigError("unknown similarity mode '" + s + "'");
}
inline const char* to_string(SimilarityMode m) {
  return m == SimilarityMode::router_columns ? "router_columns" : "logit_profile";
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Candidate ids ordered by descending score, ties to the lower index.
inline std::vector<std::size_t> by_descending_score(std::vector<std::size_t> ids, const std::vector<double>& scores) {
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  return ids;
}

inline std::vector<std::vector<std::size_t>> pick_dominants(const SelectionPlan& plan, const GateScoreTable& scores,
                                                            std::size_t group_size) {
  MOEREPL_REQUIRE(group_size >= 1, "group_size must be >= 1");
  MOEREPL_REQUIRE(plan.layers.size() == scores.scores.size(), "plan/scores layer count mismatch");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    const auto& cand = plan.layers[j].candidate_ids;
    const std::size_t m = ceil_div(cand.size(), group_size);
    auto ranked = by_descending_score(cand, scores.scores[j]);
    ranked.resize(m);
    out.push_back(std::move(ranked));
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  MOEREPL_REQUIRE(a.size() == b.size(), "cosine_similarity length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace detail {

inline LayerSimilarity similarity_from_vectors(const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
                                               const std::vector<std::vector<double>>& vec_of_expert) {
  LayerSimilarity s;
  s.row_ids = rows;
  s.col_ids = cols;
  for (std::size_t r : rows) {
    std::vector<double> line;
    for (std::size_t c : cols) line.push_back(cosine_similarity(vec_of_expert[r], vec_of_expert[c]));
    s.values.push_back(std::move(line));
  }
  return s;
}

}  // namespace detail

/// Cosine similarity between candidates and dominants. In router-column mode
/// an expert is represented by its router weight column; in logit-profile
/// mode by its routing logits across every calibration token.
template <std::floating_point T>
SimilarityMatrix routing_similarity(const MoEModel<T>& model, const CalibrationSet<T>* calib, const SelectionPlan& plan,
                                    const std::vector<std::vector<std::size_t>>& dominants,
                                    SimilarityMode mode = SimilarityMode::router_columns) {
  MOEREPL_REQUIRE(plan.layers.size() == model.layers.size() && dominants.size() == model.layers.size(),
                  "routing_similarity: layer count mismatch");
  const std::size_t n = model.hyper.num_experts;
  std::vector<std::vector<std::vector<double>>> vecs(model.layers.size(), std::vector<std::vector<double>>(n));
  if (mode == SimilarityMode::router_columns) {
    for (std::size_t j = 0; j < model.layers.size(); ++j) {
      const auto& w = model.layers[j].router.w_router;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < w.rows(); ++r) vecs[j][i].push_back(static_cast<double>(w(r, i)));
    }
  } else {
    if (calib == nullptr || calib->token_count == 0) throw ContractError("logit-profile similarity needs calibration data");
    LayerObserver<T> obs = [&](std::size_t j, const Matrix<T>&, const GatingOutput<T>& g) {
      for (std::size_t i : plan.layers[j].candidate_ids)
        for (std::size_t t = 0; t < g.logits.rows(); ++t) vecs[j][i].push_back(static_cast<double>(g.logits(t, i)));
    };
    for (const auto& batch : calib->batches) model_forward(model, batch, &obs);
  }
  SimilarityMatrix out;
  for (std::size_t j = 0; j < model.layers.size(); ++j)
    out.push_back(detail::similarity_from_vectors(plan.layers[j].candidate_ids, dominants[j], vecs[j]));
  return out;
}

/// Every non-dominant candidate joins its argmax-similarity dominant; ties go
/// to the dominant with the higher score, then the lower index.
inline GroupAssignment assign_members(const SelectionPlan& plan, const std::vector<std::vector<std::size_t>>& dominants,
                                      const SimilarityMatrix& sim, const GateScoreTable& scores, std::size_t group_size) {
  MOEREPL_REQUIRE(plan.layers.size() == dominants.size() && sim.size() == dominants.size(),
                  "assign_members: layer count mismatch");
  GroupAssignment ga;
  ga.group_size_target = group_size;
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    const auto& cand = plan.layers[j].candidate_ids;
    const auto& dom = dominants[j];
    const auto& s = scores.scores[j];
    LayerGroups lg;
    if (cand.empty()) {
      ga.layers.push_back(std::move(lg));
      continue;
    }
    MOEREPL_REQUIRE(!dom.empty(), "layer with candidates needs at least one dominant");
    for (std::size_t d : dom) lg.groups.push_back(Group{d, {d}});
    const LayerSimilarity& ls = sim[j];
    MOEREPL_REQUIRE(ls.col_ids == dom, "similarity columns must be the layer dominants");
    for (std::size_t r = 0; r < ls.row_ids.size(); ++r) {
      const std::size_t e = ls.row_ids[r];
      if (std::find(dom.begin(), dom.end(), e) != dom.end()) continue;
      std::size_t best = 0;
      for (std::size_t c = 1; c < dom.size(); ++c) {
        const double v = ls.values[r][c], bv = ls.values[r][best];
        const bool better = v > bv || (v == bv && (s[dom[c]] > s[dom[best]] ||
                                                   (s[dom[c]] == s[dom[best]] && dom[c] < dom[best])));
        if (better) best = c;
      }
      lg.groups[best].member_ids.push_back(e);
    }
    for (auto& g : lg.groups) std::sort(g.member_ids.begin(), g.member_ids.end());
    ga.layers.push_back(std::move(lg));
  }
  return ga;
}

struct KMeansResult {
  std::vector<std::size_t> labels;
  std::size_t iterations = 0;
};

/// Lloyd's k-means with k-means++ seeding from `seed`. Ties go to the lower
/// centroid index; an emptied cluster is re-seeded with the point farthest
/// from its centroid.
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 100, double tol = 1e-6) {
  const std::size_t n = points.size();
  if (k < 1 || k > n) throw ContractError("kmeans: need 1 <= k <= number of points");
  const std::size_t dim = points[0].size();
  auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < dim; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
  };
  RandomSource rng(derive_seed(seed, {0x6B6D65616EULL, n, k}));
  std::vector<std::vector<double>> centroids;
  centroids.push_back(points[rng.below(n)]);
  std::vector<double> d2(n);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, dist2(points[p], c));
      d2[p] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      // All remaining points coincide with a centroid; take the first unused index.
      pick = centroids.size();
    } else {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
      while (d2[pick] == 0.0 && pick + 1 < n) ++pick;
    }
    centroids.push_back(points[pick]);
  }

  KMeansResult res;
  res.labels.assign(n, 0);
  for (res.iterations = 1; res.iterations <= max_iter; ++res.iterations) {
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double bd = dist2(points[p], centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = dist2(points[p], centroids[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      res.labels[p] = best;
    }
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t p = 0; p < n; ++p) {
      ++count[res.labels[p]];
      for (std::size_t i = 0; i < dim; ++i) next[res.labels[p]][i] += points[p][i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t p = 0; p < n; ++p) {
          const double d = dist2(points[p], centroids[res.labels[p]]);
          if (count[res.labels[p]] > 1 && d > fd) {
            fd = d;
            far = p;
          }
        }
        --count[res.labels[far]];
        res.labels[far] = c;
        count[c] = 1;
        next[c] = points[far];
        continue;
      }
      for (double& v : next[c]) v /= static_cast<double>(count[c]);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(dist2(next[c], centroids[c])));
    centroids = std::move(next);
    if (shift < tol) break;
  }
  res.iterations = std::min(res.iterations, max_iter);
  // Final assignment against the converged centroids.
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    double bd = dist2(points[p], centroids[0]);
    for (std::size_t c = 1; c < k; ++c) {
      const double d = dist2(points[p], centroids[c]);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    res.labels[p] = best;
  }
  return res;
}

/// Mean expert output over the calibration tokens for every candidate.
template <std::floating_point T>
std::vector<std::vector<std::vector<double>>> mean_expert_outputs(const MoEModel<T>& model,
                                                                  const CalibrationSet<T>& calib,
                                                                  const SelectionPlan& plan) {
  if (calib.token_count == 0) throw ContractError("calibration set is empty");
  const std::size_t n = model.hyper.num_experts;
  const std::size_t d = model.hyper.d_model;
  std::vector<std::vector<std::vector<double>>> sums(model.layers.size(),
                                                     std::vector<std::vector<double>>(n, std::vector<double>(d, 0.0)));
  LayerObserver<T> obs = [&](std::size_t j, const Matrix<T>& x, const GatingOutput<T>&) {
    for (std::size_t i : plan.layers[j].candidate_ids) {
      const auto& slot = model.layers[j].experts[i];
      MOEREPL_REQUIRE(slot.form == ExpertForm::dense && slot.weights, "k-means grouping needs dense experts");
      Matrix<T> h = matmul(x, slot.weights->w_in);
      for (auto& v : h.data()) v = v * ad::sigmoid(v);
      const Matrix<T> y = matmul(h, slot.weights->w_out);
      for (std::size_t t = 0; t < y.rows(); ++t)
        for (std::size_t c = 0; c < d; ++c) sums[j][i][c] += static_cast<double>(y(t, c));
    }
  };
  for (const auto& batch : calib.batches) model_forward(model, batch, &obs);
  for (auto& layer : sums)
    for (auto& v : layer)
      for (double& x : v) x /= static_cast<double>(calib.token_count);
  return sums;
}

/// Groups from k-means labels; each cluster's dominant is its highest-score member.
inline LayerGroups groups_from_labels(const std::vector<std::size_t>& cand, const std::vector<std::size_t>& labels,
                                      std::size_t k, const std::vector<double>& scores) {
  LayerGroups lg;
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t p = 0; p < cand.size(); ++p) members[labels[p]].push_back(cand[p]);
  for (auto& m : members) {
    if (m.empty()) continue;
    std::sort(m.begin(), m.end());
    lg.groups.push_back(Group{by_descending_score(m, scores).front(), m});
  }
  return lg;
}

/// k-means baseline. `clusters_per_layer[j]` must be 0 for a layer without
/// candidates and in [1, N'] otherwise.
template <std::floating_point T>
GroupAssignment kmeans_group(const MoEModel<T>& model, const CalibrationSet<T>& calib, const SelectionPlan& plan,
                             const GateScoreTable& scores, const std::vector<std::size_t>& clusters_per_layer,
                             std::uint64_t seed, std::size_t group_size_target = 3) {
  MOEREPL_REQUIRE(clusters_per_layer.size() == plan.layers.size(), "one cluster count per layer required");
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    const std::size_t nc = plan.layers[j].candidate_ids.size();
    const std::size_t m = clusters_per_layer[j];
    if (m > nc) throw ContractError("kmeans_group: M > N' in layer " + std::to_string(j));
    if (nc > 0 && m == 0) throw ContractError("kmeans_group: M must be >= 1 for a layer with candidates");
  }
  const auto features = mean_expert_outputs(model, calib, plan);
  GroupAssignment ga;
  ga.group_size_target = group_size_target;
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    const auto& cand = plan.layers[j].candidate_ids;
    if (cand.empty()) {
      ga.layers.emplace_back();
      continue;
    }
    std::vector<std::vector<double>> pts;
    for (std::size_t i : cand) pts.push_back(features[j][i]);
    const auto res = kmeans(pts, clusters_per_layer[j], derive_seed(seed, {j}));
    ga.layers.push_back(groups_from_labels(cand, res.labels, clusters_per_layer[j], scores.scores[j]));
  }
  return ga;
}

/// Dominant grouping end to end.
template <std::floating_point T>
GroupAssignment dominant_group(const MoEModel<T>& model, const CalibrationSet<T>* calib, const SelectionPlan& plan,
                               const GateScoreTable& scores, std::size_t group_size,
                               SimilarityMode mode = SimilarityMode::router_columns) {
  const auto dom = pick_dominants(plan, scores, group_size);
  const auto sim = routing_similarity(model, calib, plan, dom, mode);
  return assign_members(plan, dom, sim, scores, group_size);
}

/// Selection document: the plan layout plus each layer's groups.
inline nlohmann::json selection_to_json(const SelectionPlan& plan, const GroupAssignment& groups) {
  MOEREPL_REQUIRE(plan.layers.size() == groups.layers.size(), "plan/groups layer count mismatch");
  nlohmann::json doc = plan_to_json(plan);
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : groups.layers[j].groups) gs.push_back({{"dominant", g.dominant_id}, {"members", g.member_ids}});
    doc["layers"][j]["groups"] = gs;
  }
  doc["group_size"] = groups.group_size_target;
  return doc;
}

inline GroupAssignment groups_from_json(const nlohmann::json& doc) {
  try {
    GroupAssignment ga;
    ga.group_size_target = doc.at("group_size").get<std::size_t>();
    for (const auto& l : doc.at("layers")) {
      LayerGroups lg;
      for (const auto& g : l.at("groups"))
        lg.groups.push_back(Group{g.at("dominant").get<std::size_t>(), g.at("members").get<std::vector<std::size_t>>()});
      ga.layers.push_back(std::move(lg));
    }
    return ga;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed group document: ") + e.what());
  }
}

}  // namespace moerepl
