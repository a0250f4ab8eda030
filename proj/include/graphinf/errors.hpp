#pragma once

#include <stdexcept>
#include <string>

namespace graphinf {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Mismatched or invalid dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input matrix violates a required symmetry tolerance.
class SymmetryError : public Error {
 public:
  using Error::Error;
};

/// A matrix factorization failed (singular or not positive definite).
class DecompositionError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver exhausted its iteration budget.
class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& msg, double residual = -1.0)
      : Error(msg), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Recovered subgradients violate the stationarity conditions.
class KktViolationError : public Error {
 public:
  using Error::Error;
};

/// Constrained maximum-likelihood refit did not exist or diverged.
class RefitError : public Error {
 public:
  using Error::Error;
};

/// A matrix required to be invertible is numerically rank deficient.
class ConditioningError : public Error {
 public:
  using Error::Error;
};

/// The requested constraint cannot be satisfied.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// An inference target does not exist in the selected graph.
class TargetError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (CSV ingestion).
class IngestError : public Error {
 public:
  using Error::Error;
};

/// Malformed run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace graphinf
