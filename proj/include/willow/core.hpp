#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>

namespace willow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Type index into the finite type space {0, ..., K-1}.
using TypeIndex = int;

// Error categories. The CLI maps each to its own exit code.

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public ModelError {
 public:
  using ModelError::ModelError;
};

/// Precondition on a sampler or solver parameter that cannot hold for the given model.
class PreconditionError : public ModelError {
 public:
  using ModelError::ModelError;
};

class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, double at_time)
      : std::runtime_error(what), time_(at_time) {}
  explicit NumericError(const std::string& what)
      : std::runtime_error(what), time_(std::numeric_limits<double>::quiet_NaN()) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

/// Rejection or population budget exhausted.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Eigen::Index as_index(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace willow
