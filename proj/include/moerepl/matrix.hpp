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

// Dense row-major matrices and the handful of kernels the toy models need.
// Every reduction runs in a fixed loop order so repeated calls are
// bit-identical.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "moerepl/errors.hpp"

namespace moerepl {

template <std::floating_point T>
class Matrix {
 public:
  using value_type = T;

  /// Empty 0x0 placeholder. Every sized matrix has positive dimensions.
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    MOEREPL_REQUIRE(rows > 0 && cols > 0, "matrix dimensions must be positive");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    MOEREPL_REQUIRE(rows > 0 && cols > 0, "matrix dimensions must be positive");
    MOEREPL_REQUIRE(data_.size() == rows * cols, "matrix data length != rows*cols");
  }

  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    MOEREPL_REQUIRE(rows.size() > 0, "matrix literal needs at least one row");
    rows_ = rows.size();
    cols_ = rows.begin()->size();
    MOEREPL_REQUIRE(cols_ > 0, "matrix literal needs at least one column");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      MOEREPL_REQUIRE(r.size() == cols_, "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <std::floating_point U>
  Matrix<U> cast() const {
    if (empty()) return {};
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_string(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <std::floating_point T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T v) { return std::isfinite(v); });
}

template <std::floating_point T>
void require_finite(const Matrix<T>& m, const char* where) {
  if (!all_finite(m)) throw NumericError(std::string("non-finite value in ") + where);
}

template <std::floating_point T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul dimension mismatch: " + shape_string(a.rows(), a.cols()) +
                        " x " + shape_string(b.rows(), b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// a^T * b without materializing the transpose.
template <std::floating_point T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  MOEREPL_REQUIRE(a.rows() == b.rows(), "matmul_tn dimension mismatch");
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a(k, i);
      T* crow = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

// a * b^T.
template <std::floating_point T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  MOEREPL_REQUIRE(a.cols() == b.cols(), "matmul_nt dimension mismatch");
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* brow = b.row(j).data();
      T acc{0};
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  return c;
}

template <std::floating_point T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

template <std::floating_point T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  MOEREPL_REQUIRE(a.same_shape(b), "add shape mismatch");
  Matrix<T> c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] += bd[i];
  return c;
}

template <std::floating_point T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  MOEREPL_REQUIRE(a.same_shape(b), "add shape mismatch");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

template <std::floating_point T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  Matrix<T> c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

template <std::floating_point T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  MOEREPL_REQUIRE(a.same_shape(b), "max_abs_diff shape mismatch");
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

template <std::floating_point T>
double frobenius_norm(const Matrix<T>& m) {
  double acc = 0.0;
  for (T v : m.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// Row-wise softmax with max-shift. Rejects NaN input.
template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
  MOEREPL_REQUIRE(m.cols() >= 1, "softmax needs at least one column");
  for (T v : m.data())
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum{0};
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

}  // namespace moerepl
