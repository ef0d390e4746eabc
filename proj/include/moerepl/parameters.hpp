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

#include <concepts>
#include <initializer_list>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "moerepl/matrix.hpp"

namespace moerepl {

/// Coarse role of a parameter tensor; masks and gradient probes select by it.
enum class ParamClass { io, router, expert, original, adapter, base };

inline const char* to_string(ParamClass c) {
  switch (c) {
    case ParamClass::io: return "io";
    case ParamClass::router: return "router";
    case ParamClass::expert: return "expert";
    case ParamClass::original: return "original";
    case ParamClass::adapter: return "adapter";
    case ParamClass::base: return "base";
  }
  return "?";
}

/// Names of parameters an optimizer may update.
using TrainableMask = std::set<std::string>;

/// Flat list of named tensors. Used for small hand-built models in tests and
/// for gradient checks that do not involve the MoE structure.
template <std::floating_point T>
struct ParameterBag {
  struct Entry {
    std::string name;
    Matrix<T> value;
    ParamClass cls = ParamClass::expert;
  };
  std::vector<Entry> entries;

  Matrix<T>& add(std::string name, Matrix<T> value, ParamClass cls = ParamClass::expert) {
    entries.push_back({std::move(name), std::move(value), cls});
    return entries.back().value;
  }

  const Matrix<T>& get(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e.value;
    throw ContractError("no parameter named '" + name + "'");
  }
};

template <std::floating_point T, class F>
void visit_parameters(ParameterBag<T>& bag, F&& fn) {
  for (auto& e : bag.entries) fn(e.name, e.value, e.cls);
}

template <std::floating_point T, class F>
void visit_parameters(const ParameterBag<T>& bag, F&& fn) {
  for (const auto& e : bag.entries) fn(e.name, e.value, e.cls);
}

template <class Params>
TrainableMask mask_all(const Params& p) {
  TrainableMask m;
  visit_parameters(p, [&](const std::string& name, const auto&, ParamClass) { m.insert(name); });
  return m;
}

template <class Params>
TrainableMask mask_classes(const Params& p, std::initializer_list<ParamClass> classes) {
  TrainableMask m;
  visit_parameters(p, [&](const std::string& name, const auto&, ParamClass c) {
    for (ParamClass want : classes)
      if (c == want) m.insert(name);
  });
  return m;
}

template <class Params>
std::size_t parameter_count(const Params& p) {
  std::size_t n = 0;
  visit_parameters(p, [&](const std::string&, const auto& m, ParamClass) { n += m.size(); });
  return n;
}

}  // namespace moerepl
