#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stcl {

// Caller broke a documented precondition (shape mismatch, out-of-range step, ...).
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (log of a nonpositive value).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Cholesky met a nonpositive pivot.
class FactorizationError : public std::runtime_error {
 public:
  FactorizationError(std::size_t pivot, double value)
      : std::runtime_error("cholesky: nonpositive pivot " + std::to_string(value) +
                           " at index " + std::to_string(pivot)),
        pivot_(pivot) {}

  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A function evaluated during a gradient check (or training) was not finite.
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace stcl
