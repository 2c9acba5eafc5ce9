// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lime {

/// Violated precondition of a public operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Operand shapes that do not conform.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Input outside the domain of a function (log of a non-positive value, ...).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Denominator inside the dead band while no stabilizer is configured.
class SingularityError : public DomainError {
 public:
  SingularityError(const std::string& what, std::size_t unit)
      : DomainError(what + " (unit " + std::to_string(unit) + ")"), unit_(unit) {}
  std::size_t unit() const noexcept { return unit_; }

 private:
  std::size_t unit_;
};

/// A NaN or infinity appeared where finite values were required.
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

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace lime
