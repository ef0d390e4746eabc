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
#include <vector>

#include "moerepl/model.hpp"
#include "moerepl/random.hpp"

namespace testing_support {

inline moerepl::ModelHyper tiny_hyper(std::size_t d = 8, std::size_t h = 12, std::size_t n = 4, std::size_t k = 2,
                                      std::size_t layers = 2) {
  moerepl::ModelHyper hp;
  hp.input_dim = 5;
  hp.output_dim = 3;
  hp.d_model = d;
  hp.d_hidden = h;
  hp.num_experts = n;
  hp.top_k = k;
  hp.num_layers = layers;
  return hp;
}

// Dense formulation of one MoE layer: every expert is evaluated and weighted
// by its gate, which is zero outside the active set. Same arithmetic order as
// the sparse path, so results agree bit for bit.
template <class T>
moerepl::Matrix<T> dense_layer(const moerepl::MoELayer<T>& layer, const moerepl::Matrix<T>& x, std::size_t k,
                               double beta) {
  using namespace moerepl;
  const auto g = route(layer, x, k);
  const std::size_t n = layer.experts.size();
  Matrix<T> gate(x.rows(), n);
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t a = 0; a < g.active_indices[t].size(); ++a) gate(t, g.active_indices[t][a]) = g.active_gates[t][a];
  Matrix<T> out = x;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = layer.experts[i];
    auto weight = [&](int which) {
      const Matrix<T>* orig = nullptr;
      if (s.weights) orig = which == 0 ? &s.weights->w_in : &s.weights->w_out;
      if (s.form == ExpertForm::dense) {
        Matrix<T> w = *orig;
        if (s.adapter) {
          const auto& ad = which == 0 ? s.adapter->w_in : s.adapter->w_out;
          w = add(w, matmul(ad.b, ad.a));
        }
        return w;
      }
      const auto& ad = which == 0 ? s.adapter->w_in : s.adapter->w_out;
      if (s.form == ExpertForm::adapter_only) return matmul(ad.b, ad.a);
      const auto& base = layer.bases[static_cast<std::size_t>(s.group)];
      return effective_weight(orig, which == 0 ? base.w_in_share : base.w_out_share, ad.b, ad.a, beta);
    };
    Matrix<T> h = matmul(x, weight(0));
    for (auto& v : h.data()) v = v * ad::sigmoid(v);
    const Matrix<T> y = matmul(h, weight(1));
    for (std::size_t t = 0; t < x.rows(); ++t) {
      if (gate(t, i) == T{0}) continue;
      for (std::size_t c = 0; c < y.cols(); ++c) out(t, c) += y(t, c) * gate(t, i);
    }
  }
  return out;
}

// Fully independent double-precision reference for a dense-expert layer.
inline std::vector<std::vector<double>> reference_layer(const moerepl::MoELayer<double>& layer,
                                                        const moerepl::Matrix<double>& x, std::size_t k) {
  const std::size_t n = layer.experts.size(), d = x.cols();
  std::vector<std::vector<double>> out(x.rows(), std::vector<double>(d));
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::vector<double> logit(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < d; ++r) logit[i] += x(t, r) * layer.router.w_router(r, i);
    std::vector<bool> used(n, false);
    std::vector<std::size_t> act;
    for (std::size_t a = 0; a < k; ++a) {
      std::size_t best = n;
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i] && (best == n || logit[i] > logit[best])) best = i;
      used[best] = true;
      act.push_back(best);
    }
    double z = 0.0;
    for (std::size_t i : act) z += std::exp(logit[i]);
    for (std::size_t c = 0; c < d; ++c) out[t][c] = x(t, c);
    for (std::size_t i : act) {
      const auto& w = *layer.experts[i].weights;
      const double gi = std::exp(logit[i]) / z;
      std::vector<double> hid(w.w_in.cols(), 0.0);
      for (std::size_t hh = 0; hh < hid.size(); ++hh) {
        for (std::size_t r = 0; r < d; ++r) hid[hh] += x(t, r) * w.w_in(r, hh);
        hid[hh] = hid[hh] / (1.0 + std::exp(-hid[hh]));
      }
      for (std::size_t c = 0; c < d; ++c) {
        double y = 0.0;
        for (std::size_t hh = 0; hh < hid.size(); ++hh) y += hid[hh] * w.w_out(hh, c);
        out[t][c] += gi * y;
      }
    }
  }
  return out;
}

}  // namespace testing_support
