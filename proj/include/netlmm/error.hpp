#pragma once

#include <stdexcept>
#include <string>

namespace netlmm {

/// Bad input: malformed files, inconsistent dimensions, out-of-range options.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical precondition failed (non-PD covariance, singular design).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative solver ran out of iterations.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit codes used by the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumerical = 2;
inline constexpr int kExitNonConvergence = 3;

}  // namespace netlmm
