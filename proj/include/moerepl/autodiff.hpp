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

// Reverse-mode differentiation over whole matrices.
//
// A Tape records one forward pass. Nodes are appended in evaluation order, so
// walking them backwards is a valid topological order. Only the operations
// the toy MoE models use are provided. A tape is confined to one thread.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "moerepl/errors.hpp"
#include "moerepl/matrix.hpp"

namespace moerepl::ad {

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <std::floating_point T>
using GradientMap = std::map<std::string, Matrix<T>>;

template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix<T>& grad_out)>;

  /// With `record == false` no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, {}); }

  /// Leaf for a named model parameter. Frozen leaves behave as constants and
  /// never appear in the gradient map.
  Var<T> parameter(const std::string& name, const Matrix<T>& value, bool trainable) {
    const bool req = record_ && trainable;
    Var<T> v = push(value, req, {});
    if (req) params_.emplace_back(name, v.id());
    return v;
  }

  /// Appends an interior node. The closure only runs if some input needs a
  /// gradient and the tape is recording.
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool req = false;
    if (record_)
      for (const auto& in : inputs) req = req || in.requires_grad();
    return push(std::move(value), req, req ? std::move(fn) : BackwardFn{});
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void accumulate(const Var<T>& v, const Matrix<T>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      add_inplace(n.grad, g);
    }
  }

  /// Runs reverse accumulation from a scalar (1x1) loss and returns the
  /// gradient of every trainable parameter leaf that took part in the pass.
  GradientMap<T> backward(const Var<T>& loss) {
    const Matrix<T>& lv = loss.value();
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_string(lv.rows(), lv.cols()));
    if (!std::isfinite(lv(0, 0))) throw NumericError("backward: non-finite loss");
    for (auto& n : nodes_) n.grad = Matrix<T>{};
    nodes_[loss.id()].grad = Matrix<T>(1, 1, T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
    GradientMap<T> grads;
    for (const auto& [name, id] : params_) {
      const Matrix<T>& g = nodes_[id].grad;
      Matrix<T> gm = g.empty() ? Matrix<T>(nodes_[id].value.rows(), nodes_[id].value.cols()) : g;
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, std::move(gm));
      } else {
        add_inplace(it->second, gm);
      }
    }
    return grads;
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Matrix<T> value, bool req, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix<T>{}, req, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return a.tape()->record(moerepl::matmul(a.value(), b.value()), {a, b},
                          [a, b](Tape<T>& t, const Matrix<T>& g) {
                            if (a.requires_grad()) t.accumulate(a, matmul_nt(g, b.value()));
                            if (b.requires_grad()) t.accumulate(b, matmul_tn(a.value(), g));
                          });
}

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return a.tape()->record(moerepl::add(a.value(), b.value()), {a, b},
                          [a, b](Tape<T>& t, const Matrix<T>& g) {
                            t.accumulate(a, g);
                            t.accumulate(b, g);
                          });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  return a.tape()->record(moerepl::scale(a.value(), s), {a},
                          [a, s](Tape<T>& t, const Matrix<T>& g) { t.accumulate(a, moerepl::scale(g, s)); });
}

template <std::floating_point T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  MOEREPL_REQUIRE(a.value().same_shape(b.value()), "hadamard shape mismatch");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.requires_grad()) {
      Matrix<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= b.value().data()[i];
      t.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Matrix<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= a.value().data()[i];
      t.accumulate(b, gb);
    }
  });
}

template <std::floating_point T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

/// x * sigmoid(x), elementwise.
template <std::floating_point T>
Var<T> silu(const Var<T>& a) {
  Matrix<T> out = a.value();
  for (auto& v : out.data()) v = v * sigmoid(v);
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> ga = g;
    const auto x = a.value().data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T s = sigmoid(x[i]);
      ga.data()[i] *= s * (T{1} + x[i] * (T{1} - s));
    }
    t.accumulate(a, ga);
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  T acc{0};
  for (T v : a.value().data()) acc += v;
  return a.tape()->record(Matrix<T>(1, 1, acc), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, Matrix<T>(a.value().rows(), a.value().cols(), g(0, 0)));
  });
}

template <std::floating_point T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> idx) {
  MOEREPL_REQUIRE(!idx.empty(), "gather_rows needs at least one index");
  const Matrix<T>& av = a.value();
  Matrix<T> out(idx.size(), av.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    MOEREPL_REQUIRE(idx[r] < av.rows(), "gather_rows index out of range");
    std::copy(av.row(idx[r]).begin(), av.row(idx[r]).end(), out.row(r).begin());
  }
  return a.tape()->record(std::move(out), {a}, [a, idx = std::move(idx)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> ga(a.value().rows(), a.value().cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = ga.row(idx[r]);
      auto src = g.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    t.accumulate(a, ga);
  });
}

/// base + rows scattered to positions `idx` (row r of `rows` lands on row idx[r]).
template <std::floating_point T>
Var<T> scatter_add_rows(const Var<T>& base, const Var<T>& rows, std::vector<std::size_t> idx) {
  const Matrix<T>& bv = base.value();
  const Matrix<T>& rv = rows.value();
  MOEREPL_REQUIRE(rv.rows() == idx.size() && rv.cols() == bv.cols(), "scatter_add_rows shape mismatch");
  Matrix<T> out = bv;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    MOEREPL_REQUIRE(idx[r] < bv.rows(), "scatter_add_rows index out of range");
    auto dst = out.row(idx[r]);
    auto src = rv.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  return base.tape()->record(std::move(out), {base, rows},
                             [base, rows, idx = std::move(idx)](Tape<T>& t, const Matrix<T>& g) {
                               t.accumulate(base, g);
                               if (rows.requires_grad()) {
                                 Matrix<T> gr(idx.size(), g.cols());
                                 for (std::size_t r = 0; r < idx.size(); ++r)
                                   std::copy(g.row(idx[r]).begin(), g.row(idx[r]).end(), gr.row(r).begin());
                                 t.accumulate(rows, gr);
                               }
                             });
}

/// Row i of `a` multiplied by the scalar col(i, 0).
template <std::floating_point T>
Var<T> scale_rows(const Var<T>& a, const Var<T>& col) {
  const Matrix<T>& av = a.value();
  const Matrix<T>& cv = col.value();
  MOEREPL_REQUIRE(cv.cols() == 1 && cv.rows() == av.rows(), "scale_rows expects an n x 1 column");
  Matrix<T> out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (auto& v : out.row(i)) v *= cv(i, 0);
  return a.tape()->record(std::move(out), {a, col}, [a, col](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& av = a.value();
    const Matrix<T>& cv = col.value();
    if (a.requires_grad()) {
      Matrix<T> ga = g;
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (auto& v : ga.row(i)) v *= cv(i, 0);
      t.accumulate(a, ga);
    }
    if (col.requires_grad()) {
      Matrix<T> gc(cv.rows(), 1);
      for (std::size_t i = 0; i < av.rows(); ++i) {
        T acc{0};
        for (std::size_t j = 0; j < av.cols(); ++j) acc += g(i, j) * av(i, j);
        gc(i, 0) = acc;
      }
      t.accumulate(col, gc);
    }
  });
}

/// Column vector of m(idx[r], column).
template <std::floating_point T>
Var<T> gather_entries(const Var<T>& m, std::vector<std::size_t> idx, std::size_t column) {
  const Matrix<T>& mv = m.value();
  MOEREPL_REQUIRE(!idx.empty() && column < mv.cols(), "gather_entries bad arguments");
  Matrix<T> out(idx.size(), 1);
  for (std::size_t r = 0; r < idx.size(); ++r) out(r, 0) = mv(idx[r], column);
  return m.tape()->record(std::move(out), {m},
                          [m, idx = std::move(idx), column](Tape<T>& t, const Matrix<T>& g) {
                            Matrix<T> gm(m.value().rows(), m.value().cols());
                            for (std::size_t r = 0; r < idx.size(); ++r) gm(idx[r], column) += g(r, 0);
                            t.accumulate(m, gm);
                          });
}

/// Per row, softmax restricted to `active[row]` with zeros elsewhere.
/// Logits outside the active set never enter the value, so their gradient is
/// exactly zero.
template <std::floating_point T>
Var<T> masked_softmax_rows(const Var<T>& logits, std::vector<std::vector<std::size_t>> active) {
  const Matrix<T>& lv = logits.value();
  MOEREPL_REQUIRE(active.size() == lv.rows(), "masked_softmax_rows: one index list per row");
  Matrix<T> out(lv.rows(), lv.cols());
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    const auto& s = active[i];
    MOEREPL_REQUIRE(!s.empty(), "masked_softmax_rows: empty active set");
    T mx = lv(i, s[0]);
    for (std::size_t j : s) mx = std::max(mx, lv(i, j));
    T z{0};
    for (std::size_t j : s) z += std::exp(lv(i, j) - mx);
    for (std::size_t j : s) out(i, j) = std::exp(lv(i, j) - mx) / z;
  }
  Matrix<T> gates = out;
  return logits.tape()->record(
      std::move(out), {logits},
      [logits, gates = std::move(gates), active = std::move(active)](Tape<T>& t, const Matrix<T>& g) {
        Matrix<T> gl(gates.rows(), gates.cols());
        for (std::size_t i = 0; i < gates.rows(); ++i) {
          T dot{0};
          for (std::size_t j : active[i]) dot += gates(i, j) * g(i, j);
          for (std::size_t j : active[i]) gl(i, j) = gates(i, j) * (g(i, j) - dot);
        }
        t.accumulate(logits, gl);
      });
}

/// Mean over all entries of (pred - target)^2.
template <std::floating_point T>
Var<T> mse_loss(const Var<T>& pred, const Matrix<T>& target) {
  const Matrix<T>& pv = pred.value();
  MOEREPL_REQUIRE(pv.same_shape(target), "mse_loss shape mismatch");
  T acc{0};
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T d = pv.data()[i] - target.data()[i];
    acc += d * d;
  }
  const T n = static_cast<T>(pv.size());
  return pred.tape()->record(Matrix<T>(1, 1, acc / n), {pred},
                             [pred, target, n](Tape<T>& t, const Matrix<T>& g) {
                               Matrix<T> gp = pred.value();
                               for (std::size_t i = 0; i < gp.size(); ++i)
                                 gp.data()[i] = T{2} * (gp.data()[i] - target.data()[i]) / n * g(0, 0);
                               t.accumulate(pred, gp);
                             });
}

/// Mean softmax cross-entropy of row logits against integer labels.
template <std::floating_point T>
Var<T> cross_entropy_loss(const Var<T>& logits, const std::vector<int>& labels) {
  const Matrix<T>& lv = logits.value();
  MOEREPL_REQUIRE(labels.size() == lv.rows(), "cross_entropy_loss: one label per row");
  Matrix<T> probs = softmax_rows(lv);
  T acc{0};
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    MOEREPL_REQUIRE(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < lv.cols(), "label out of range");
    T mx = lv(i, 0);
    for (T v : lv.row(i)) mx = std::max(mx, v);
    T z{0};
    for (T v : lv.row(i)) z += std::exp(v - mx);
    acc += (std::log(z) + mx) - lv(i, static_cast<std::size_t>(labels[i]));
  }
  const T n = static_cast<T>(lv.rows());
  return logits.tape()->record(Matrix<T>(1, 1, acc / n), {logits},
                               [logits, labels, probs = std::move(probs), n](Tape<T>& t, const Matrix<T>& g) {
                                 Matrix<T> gl = probs;
                                 for (std::size_t i = 0; i < gl.rows(); ++i) {
                                   gl(i, static_cast<std::size_t>(labels[i])) -= T{1};
                                   for (auto& v : gl.row(i)) v *= g(0, 0) / n;
                                 }
                                 t.accumulate(logits, gl);
                               });
}

}  // namespace moerepl::ad
