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

// Toy mixture-of-experts network: input projection, L residual MoE layers
// with softmax-then-top-k routing, and a linear output head.
//
// An expert slot is dense (its own weights, optionally with a mergeable
// adapter), replaced (frozen original + group shared base + adapter,
// interpolated by the model-wide annealing factor), or adapter-only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "moerepl/autodiff.hpp"
#include "moerepl/errors.hpp"
#include "moerepl/matrix.hpp"
#include "moerepl/optimizer.hpp"
#include "moerepl/parameters.hpp"
#include "moerepl/random.hpp"
#include "moerepl/schedule.hpp"
#include "moerepl/tasks.hpp"

namespace moerepl {

struct ModelHyper {
  std::size_t input_dim = 16;
  std::size_t output_dim = 8;
  std::size_t d_model = 32;
  std::size_t d_hidden = 64;
  std::size_t num_experts = 16;
  std::size_t top_k = 2;
  std::size_t num_layers = 4;

  void validate() const {
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("top_k must satisfy 1 <= top_k <= num_experts");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (input_dim == 0 || output_dim == 0 || d_model == 0 || d_hidden == 0)
      throw ConfigError("model dimensions must be positive");
  }

  bool operator==(const ModelHyper&) const = default;
};

template <std::floating_point T>
struct ExpertParams {
  Matrix<T> w_in;   // d_model x d_hidden
  Matrix<T> w_out;  // d_hidden x d_model
};

template <std::floating_point T>
struct RouterParams {
  Matrix<T> w_router;  // d_model x N
};

template <std::floating_point T>
struct LowRankAdapter {
  Matrix<T> a;  // r x m
  Matrix<T> b;  // n x r

  std::size_t rank() const noexcept { return a.rows(); }
  Matrix<T> product() const { return matmul(b, a); }
};

template <std::floating_point T>
struct AdapterPair {
  LowRankAdapter<T> w_in;
  LowRankAdapter<T> w_out;
};

enum class ExpertForm { dense, replaced, adapter_only };

inline const char* to_string(ExpertForm f) {
  switch (f) {
    case ExpertForm::dense: return "dense";
    case ExpertForm::replaced: return "replaced";
    case ExpertForm::adapter_only: return "adapter_only";
  }
  return "?";
}

inline ExpertForm expert_form_from_string(const std::string& s) {
  if (s == "dense") return ExpertForm::dense;
  if (s == "replaced") return ExpertForm::replaced;
  if (s == "adapter_only") return ExpertForm::adapter_only;
  throw ContractError("unknown expert form '" + s + "'");
}

template <std::floating_point T>
struct ExpertSlot {
  ExpertForm form = ExpertForm::dense;
  // Dense weights, or the frozen original of a replaced expert (absent once dropped).
  std::optional<ExpertParams<T>> weights;
  std::optional<AdapterPair<T>> adapter;
  int group = -1;  // index into MoELayer::bases for replaced experts
};

template <std::floating_point T>
struct SharedBase {
  Matrix<T> w_in_share;
  Matrix<T> w_out_share;
  std::vector<std::size_t> member_ids;
  std::size_t group_id = 0;
};

template <std::floating_point T>
struct MoELayer {
  RouterParams<T> router;
  std::vector<ExpertSlot<T>> experts;
  std::vector<SharedBase<T>> bases;
};

template <std::floating_point T>
struct MoEModel {
  ModelHyper hyper;
  Matrix<T> input_proj;   // input_dim x d_model
  std::vector<MoELayer<T>> layers;
  Matrix<T> output_head;  // d_model x output_dim
  double beta = 1.0;      // annealing factor shared by every replaced expert
};

template <std::floating_point T>
struct GatingOutput {
  Matrix<T> logits;
  Matrix<T> dense_gates;
  std::vector<std::vector<std::size_t>> active_indices;  // per token, by descending gate
  std::vector<std::vector<T>> active_gates;              // renormalized over the active set
};

inline std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer); }

inline std::string expert_prefix(std::size_t layer, std::size_t expert) {
  return layer_prefix(layer) + ".experts." + std::to_string(expert);
}

inline std::string base_prefix(std::size_t layer, std::size_t group) {
  return layer_prefix(layer) + ".bases." + std::to_string(group);
}

// Visits every tensor with a stable name. Order is fixed and is also the
// checkpoint tensor order.
template <class Model, class F>
  requires std::same_as<std::remove_const_t<Model>, MoEModel<float>> ||
           std::same_as<std::remove_const_t<Model>, MoEModel<double>>
void visit_parameters(Model& model, F&& fn) {
  fn(std::string("input_proj"), model.input_proj, ParamClass::io);
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    auto& layer = model.layers[j];
    fn(layer_prefix(j) + ".router", layer.router.w_router, ParamClass::router);
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
      auto& slot = layer.experts[i];
      const std::string p = expert_prefix(j, i);
      if (slot.weights) {
        const bool orig = slot.form == ExpertForm::replaced;
        const std::string wp = orig ? p + ".original" : p;
        const ParamClass c = orig ? ParamClass::original : ParamClass::expert;
        fn(wp + ".w_in", slot.weights->w_in, c);
        fn(wp + ".w_out", slot.weights->w_out, c);
      }
      if (slot.adapter) {
        fn(p + ".adapter.w_in.a", slot.adapter->w_in.a, ParamClass::adapter);
        fn(p + ".adapter.w_in.b", slot.adapter->w_in.b, ParamClass::adapter);
        fn(p + ".adapter.w_out.a", slot.adapter->w_out.a, ParamClass::adapter);
        fn(p + ".adapter.w_out.b", slot.adapter->w_out.b, ParamClass::adapter);
      }
    }
    for (std::size_t g = 0; g < layer.bases.size(); ++g) {
      fn(base_prefix(j, g) + ".w_in", layer.bases[g].w_in_share, ParamClass::base);
      fn(base_prefix(j, g) + ".w_out", layer.bases[g].w_out_share, ParamClass::base);
    }
  }
  fn(std::string("output_head"), model.output_head, ParamClass::io);
}

template <std::floating_point T>
MoEModel<T> init_model(const ModelHyper& hyper, std::uint64_t seed) {
  hyper.validate();
  auto draw = [&](std::initializer_list<std::uint64_t> tags, std::size_t r, std::size_t c, double std) {
    RandomSource rng(derive_seed(seed, tags));
    return rng.normal_matrix<T>(r, c, std);
  };
  const auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  MoEModel<T> m;
  m.hyper = hyper;
  m.input_proj = draw({1}, hyper.input_dim, hyper.d_model, inv_sqrt(hyper.input_dim));
  for (std::size_t j = 0; j < hyper.num_layers; ++j) {
    MoELayer<T> layer;
    layer.router.w_router = draw({2, j}, hyper.d_model, hyper.num_experts, inv_sqrt(hyper.d_model));
    for (std::size_t i = 0; i < hyper.num_experts; ++i) {
      ExpertSlot<T> slot;
      slot.weights = ExpertParams<T>{draw({3, j, i, 0}, hyper.d_model, hyper.d_hidden, inv_sqrt(hyper.d_model)),
                                     draw({3, j, i, 1}, hyper.d_hidden, hyper.d_model, inv_sqrt(hyper.d_hidden))};
      layer.experts.push_back(std::move(slot));
    }
    m.layers.push_back(std::move(layer));
  }
  m.output_head = draw({4}, hyper.d_model, hyper.output_dim, inv_sqrt(hyper.d_model));
  return m;
}

template <std::floating_point U, std::floating_point T>
MoEModel<U> cast_model(const MoEModel<T>& src) {
  MoEModel<U> dst;
  dst.hyper = src.hyper;
  dst.beta = src.beta;
  dst.input_proj = src.input_proj.template cast<U>();
  dst.output_head = src.output_head.template cast<U>();
  for (const auto& l : src.layers) {
    MoELayer<U> nl;
    nl.router.w_router = l.router.w_router.template cast<U>();
    for (const auto& s : l.experts) {
      ExpertSlot<U> ns;
      ns.form = s.form;
      ns.group = s.group;
      if (s.weights) ns.weights = ExpertParams<U>{s.weights->w_in.template cast<U>(), s.weights->w_out.template cast<U>()};
      if (s.adapter) {
        ns.adapter = AdapterPair<U>{
            {s.adapter->w_in.a.template cast<U>(), s.adapter->w_in.b.template cast<U>()},
            {s.adapter->w_out.a.template cast<U>(), s.adapter->w_out.b.template cast<U>()}};
      }
      nl.experts.push_back(std::move(ns));
    }
    for (const auto& b : l.bases)
      nl.bases.push_back({b.w_in_share.template cast<U>(), b.w_out_share.template cast<U>(), b.member_ids, b.group_id});
    dst.layers.push_back(std::move(nl));
  }
  return dst;
}

/// Softmax over logits, then the k largest gates (ties: lower index) with the
/// selected gates renormalized to sum to one.
template <std::floating_point T>
GatingOutput<T> route_from_logits(Matrix<T> logits, std::size_t top_k) {
  const std::size_t n = logits.cols();
  if (top_k < 1 || top_k > n) throw ConfigError("top_k must satisfy 1 <= top_k <= num_experts");
  GatingOutput<T> out;
  out.dense_gates = softmax_rows(logits);
  out.active_indices.resize(logits.rows());
  out.active_gates.resize(logits.rows());
  std::vector<std::size_t> order(n);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto g = out.dense_gates.row(t);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k), order.end(),
                      [&](std::size_t x, std::size_t y) { return g[x] > g[y] || (g[x] == g[y] && x < y); });
    auto& idx = out.active_indices[t];
    idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
    // Renormalized gates are a softmax over the active logits; logits
    // outside the active set do not enter.
    T mx = logits(t, idx[0]);
    for (std::size_t i : idx) mx = std::max(mx, logits(t, i));
    T z{0};
    for (std::size_t i : idx) z += std::exp(logits(t, i) - mx);
    for (std::size_t i : idx) out.active_gates[t].push_back(std::exp(logits(t, i) - mx) / z);
  }
  out.logits = std::move(logits);
  return out;
}

template <std::floating_point T>
GatingOutput<T> route(const MoELayer<T>& layer, const Matrix<T>& x, std::size_t top_k) {
  MOEREPL_REQUIRE(x.cols() == layer.router.w_router.rows(), "route: x.cols != d_model");
  return route_from_logits(matmul(x, layer.router.w_router), top_k);
}

/// Called once per layer during a forward pass with the layer input and its routing.
template <std::floating_point T>
using LayerObserver = std::function<void(std::size_t layer, const Matrix<T>& x, const GatingOutput<T>& gating)>;

/// Creates tape leaves for model parameters on demand, once per name.
template <std::floating_point T>
class LeafCache {
 public:
  LeafCache(ad::Tape<T>& tape, const TrainableMask& mask) : tape_(tape), mask_(mask) {}

  ad::Var<T> get(const std::string& name, const Matrix<T>& value) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    ad::Var<T> v = tape_.parameter(name, value, mask_.contains(name));
    leaves_.emplace(name, v);
    return v;
  }

  ad::Tape<T>& tape() { return tape_; }

 private:
  ad::Tape<T>& tape_;
  const TrainableMask& mask_;
  std::map<std::string, ad::Var<T>> leaves_;
};

namespace detail {

template <std::floating_point T>
ad::Var<T> with_adapter(LeafCache<T>& leaves, const std::string& prefix, ad::Var<T> w,
                        const LowRankAdapter<T>& ad_) {
  ad::Var<T> b = leaves.get(prefix + ".b", ad_.b);
  ad::Var<T> a = leaves.get(prefix + ".a", ad_.a);
  return ad::add(w, ad::matmul(b, a));
}

// W* for one matrix (which == 0: w_in, 1: w_out) of expert i in layer j.
template <std::floating_point T>
ad::Var<T> expert_weight(LeafCache<T>& leaves, const MoELayer<T>& layer, std::size_t j, std::size_t i,
                         int which, double beta) {
  const ExpertSlot<T>& slot = layer.experts[i];
  const std::string p = expert_prefix(j, i);
  const char* mat = which == 0 ? "w_in" : "w_out";
  const std::string adapter_p = p + ".adapter." + mat;
  auto pick_adapter = [&]() -> const LowRankAdapter<T>& {
    return which == 0 ? slot.adapter->w_in : slot.adapter->w_out;
  };
  switch (slot.form) {
    case ExpertForm::dense: {
      MOEREPL_REQUIRE(slot.weights.has_value(), "dense expert without weights");
      const Matrix<T>& w = which == 0 ? slot.weights->w_in : slot.weights->w_out;
      ad::Var<T> v = leaves.get(p + "." + mat, w);
      return slot.adapter ? with_adapter(leaves, adapter_p, v, pick_adapter()) : v;
    }
    case ExpertForm::replaced: {
      MOEREPL_REQUIRE(slot.adapter.has_value(), "replaced expert without adapter");
      MOEREPL_REQUIRE(slot.group >= 0 && static_cast<std::size_t>(slot.group) < layer.bases.size(),
                      "replaced expert has no valid group");
      const SharedBase<T>& base = layer.bases[static_cast<std::size_t>(slot.group)];
      std::optional<ad::Var<T>> orig;
      if (beta > 0.0) {
        MOEREPL_REQUIRE(slot.weights.has_value(), "beta > 0 but original weights were dropped");
        orig = leaves.get(p + ".original." + mat, which == 0 ? slot.weights->w_in : slot.weights->w_out);
      }
      ad::Var<T> bv = leaves.get(base_prefix(j, static_cast<std::size_t>(slot.group)) + "." + mat,
                                 which == 0 ? base.w_in_share : base.w_out_share);
      const LowRankAdapter<T>& a = pick_adapter();
      return ad::effective_weight(orig, bv, leaves.get(adapter_p + ".b", a.b), leaves.get(adapter_p + ".a", a.a), beta);
    }
    case ExpertForm::adapter_only: {
      MOEREPL_REQUIRE(slot.adapter.has_value(), "adapter-only expert without adapter");
      const LowRankAdapter<T>& a = pick_adapter();
      return ad::matmul(leaves.get(adapter_p + ".b", a.b), leaves.get(adapter_p + ".a", a.a));
    }
  }
  throw ContractError("unreachable expert form");
}

}  // namespace detail

/// y = x + sum over active experts of gate * w_out^T silu(w_in^T x), token-wise.
/// Only experts with at least one routed token are evaluated.
template <std::floating_point T>
ad::Var<T> layer_forward(LeafCache<T>& leaves, const MoELayer<T>& layer, std::size_t j, const ad::Var<T>& x,
                         std::size_t top_k, double beta, const LayerObserver<T>* observer = nullptr,
                         ad::Var<T>* logits_out = nullptr) {
  const std::size_t n = layer.experts.size();
  MOEREPL_REQUIRE(x.value().cols() == layer.router.w_router.rows(), "layer_forward: x.cols != d_model");
  MOEREPL_REQUIRE(layer.router.w_router.cols() == n, "router width != expert count");
  ad::Var<T> router = leaves.get(layer_prefix(j) + ".router", layer.router.w_router);
  ad::Var<T> logits = ad::matmul(x, router);
  if (logits_out) *logits_out = logits;
  GatingOutput<T> gating = route_from_logits(logits.value(), top_k);
  if (observer && *observer) (*observer)(j, x.value(), gating);

  ad::Var<T> gates = ad::masked_softmax_rows(logits, gating.active_indices);
  std::vector<std::vector<std::size_t>> tokens_of(n);
  for (std::size_t t = 0; t < gating.active_indices.size(); ++t)
    for (std::size_t i : gating.active_indices[t]) tokens_of[i].push_back(t);

  ad::Var<T> out = x;
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens_of[i].empty()) continue;
    ad::Var<T> xi = ad::gather_rows(x, tokens_of[i]);
    ad::Var<T> gi = ad::gather_entries(gates, tokens_of[i], i);
    ad::Var<T> w_in = detail::expert_weight(leaves, layer, j, i, 0, beta);
    ad::Var<T> w_out = detail::expert_weight(leaves, layer, j, i, 1, beta);
    ad::Var<T> yi = ad::matmul(ad::silu(ad::matmul(xi, w_in)), w_out);
    out = ad::scatter_add_rows(out, ad::scale_rows(yi, gi), tokens_of[i]);
  }
  return out;
}

template <std::floating_point T>
ad::Var<T> model_forward(LeafCache<T>& leaves, const MoEModel<T>& model, const Matrix<T>& inputs,
                         const LayerObserver<T>* observer = nullptr, std::vector<ad::Var<T>>* router_logits = nullptr) {
  MOEREPL_REQUIRE(inputs.cols() == model.input_proj.rows(), "model_forward: input width mismatch");
  ad::Tape<T>& tape = leaves.tape();
  ad::Var<T> h = ad::matmul(tape.constant(inputs), leaves.get("input_proj", model.input_proj));
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    ad::Var<T> logits;
    h = layer_forward(leaves, model.layers[j], j, h, model.hyper.top_k, model.beta, observer, &logits);
    if (router_logits) router_logits->push_back(logits);
  }
  return ad::matmul(h, leaves.get("output_head", model.output_head));
}

/// Inference-only forward; predictions are tokens x output_dim.
template <std::floating_point T>
Matrix<T> model_forward(const MoEModel<T>& model, const Matrix<T>& inputs, const LayerObserver<T>* observer = nullptr) {
  ad::Tape<T> tape(false);
  const TrainableMask none;
  LeafCache<T> leaves(tape, none);
  return model_forward(leaves, model, inputs, observer).value();
}

template <std::floating_point T>
Matrix<T> layer_forward(const MoELayer<T>& layer, const Matrix<T>& x, std::size_t top_k, double beta = 1.0) {
  ad::Tape<T> tape(false);
  const TrainableMask none;
  LeafCache<T> leaves(tape, none);
  return layer_forward(leaves, layer, 0, tape.constant(x), top_k, beta).value();
}

template <std::floating_point T>
ad::Var<T> batch_loss(const ad::Var<T>& predictions, const Batch<T>& batch) {
  if (!batch.labels.empty()) return ad::cross_entropy_loss(predictions, batch.labels);
  return ad::mse_loss(predictions, batch.targets);
}

/// Switch-style balance term N * sum_i f_i * P_i, where f_i is the fraction of
/// top-k assignments routed to expert i (held constant) and P_i the mean dense
/// gate probability. Equals 1 under perfectly uniform routing.
template <std::floating_point T>
ad::Var<T> load_balance_loss(const ad::Var<T>& logits, std::size_t top_k) {
  const Matrix<T>& lv = logits.value();
  const std::size_t tokens = lv.rows(), n = lv.cols();
  const GatingOutput<T> g = route_from_logits(lv, top_k);
  Matrix<T> f(n, 1);
  for (const auto& act : g.active_indices)
    for (std::size_t i : act) f(i, 0) += T(1) / static_cast<T>(tokens * top_k);
  std::vector<std::vector<std::size_t>> all(tokens, std::vector<std::size_t>(n));
  for (auto& row : all)
    for (std::size_t i = 0; i < n; ++i) row[i] = i;
  ad::Var<T> probs = ad::masked_softmax_rows(logits, all);
  ad::Var<T> fp = ad::matmul(probs, logits.tape()->constant(f));
  return ad::scale(ad::sum(fp), static_cast<T>(n) / static_cast<T>(tokens));
}

/// Loss of `model` on `batch`, recorded on a tape whose trainable leaves are
/// `mask`, plus `balance` times the mean per-layer balance term.
template <std::floating_point T>
ad::Var<T> record_loss(ad::Tape<T>& tape, const MoEModel<T>& model, const Batch<T>& batch, const TrainableMask& mask,
                       double balance = 0.0) {
  LeafCache<T> leaves(tape, mask);
  std::vector<ad::Var<T>> logits;
  ad::Var<T> loss = batch_loss(model_forward(leaves, model, batch.inputs, static_cast<const LayerObserver<T>*>(nullptr), &logits), batch);
  if (balance > 0.0)
    for (const auto& l : logits)
      loss = ad::add(loss, ad::scale(load_balance_loss(l, model.hyper.top_k),
                                     static_cast<T>(balance / static_cast<double>(logits.size()))));
  return loss;
}

template <std::floating_point T>
double evaluate_loss(const MoEModel<T>& model, const Batch<T>& batch) {
  ad::Tape<T> tape(false);
  const TrainableMask none;
  return static_cast<double>(record_loss(tape, model, batch, none).value()(0, 0));
}

/// One forward/backward/AdamW step restricted to `mask`. Returns the loss
/// measured before the update.
template <std::floating_point T>
double train_step(MoEModel<T>& model, const Batch<T>& batch, AdamW<T>& opt, const TrainableMask& mask,
                  double balance = 0.0) {
  ad::Tape<T> tape(true);
  ad::Var<T> loss = record_loss(tape, model, batch, mask, balance);
  const double value = static_cast<double>(loss.value()(0, 0));
  if (!std::isfinite(value)) throw NumericError("train_step: non-finite loss " + std::to_string(value));
  if (mask.empty()) return value;
  ad::GradientMap<T> grads = tape.backward(loss);
  opt.step(model, grads, mask);
  return value;
}

}  // namespace moerepl
