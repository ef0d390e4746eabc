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

#include <stdexcept>
#include <string>

namespace moerepl {

// Violated precondition or shape contract.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structured checkpoint decode failure.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { version, bounds, schema };

  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

  static const char* kind_name(Kind k) {
    switch (k) {
      case Kind::version: return "version";
      case Kind::bounds: return "bounds";
      case Kind::schema: return "schema";
    }
    return "unknown";
  }

 private:
  Kind kind_;
};

// A pipeline phase was asked to run before the artifact it consumes exists.
class MissingArtifactError : public IoError {
 public:
  MissingArtifactError(std::string phase, std::string artifact)
        : IoError("phase '" + phase + "' requires missing artifact '" + artifact + "'"),
        phase_(std::move(phase)),
        artifact_(std::move(artifact)) {}

  const std::string& phase() const noexcept { return phase_; }
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string phase_;
  std::string artifact_;
};

// No base threshold reaches the requested compression ratio.
class InfeasibleTargetError : public std::runtime_error {
 public:
  InfeasibleTargetError(double target, double max_achievable, double threshold_at_max)
      : std::runtime_error("target infeasible: requested rho " + std::to_string(target) +
                           ", max achievable " + std::to_string(max_achievable)),
        target_(target),
        max_achievable_(max_achievable),
        threshold_at_max_(threshold_at_max) {}

  double target() const noexcept { return target_; }
  double max_achievable() const noexcept { return max_achievable_; }
  double threshold_at_max() const noexcept { return threshold_at_max_; }

 private:
  double target_;
  double max_achievable_;
  double threshold_at_max_;
};

#define MOEREPL_REQUIRE(cond, msg)                                   \
  do {                                                               \
    if (!(cond)) throw ::moerepl::ContractError(std::string(msg));   \
  } while (0)

}  // namespace moerepl
