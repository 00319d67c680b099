// Copyright 2026 The DFC Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace dfc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations on caller-supplied values.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A configuration document failed validation; `key()` names the offender.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Malformed, truncated or mismatched bitstreams.
class BitstreamError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// An iterative routine stopped before reaching its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// The Poisson race did not settle within the candidate budget.
class PfrTruncation : public Error {
 public:
  PfrTruncation(const std::string& what, std::uint64_t candidates, double gap)
      : Error(what), candidates_(candidates), gap_(gap) {}
  std::uint64_t candidates() const { return candidates_; }
  // log(best score) - log(T_last / r_max) when the budget ran out.
  double gap() const { return gap_; }

 private:
  std::uint64_t candidates_;
  double gap_;
};

}  // namespace dfc
