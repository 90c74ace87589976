#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace crpg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed config, incompatible options, violated preconditions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Solver failure, infeasible program, non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A computed quantity missed its tolerance (grad-check, acceptance).
class ToleranceError : public Error {
 public:
  using Error::Error;
};

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace crpg
