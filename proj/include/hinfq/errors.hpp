#pragma once

#include <stdexcept>
#include <string>

namespace hinfq {

// Base for failures of numerical solvability: the problem instance (or the
// running estimate) does not admit the requested operation. The CLI maps
// these to exit code 2; plain usage or I/O errors map to 1.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A simulated state left the trusted numeric range. Carries the step at
// which the guard tripped so a caller can report where a run blew up.
struct DivergenceError : NumericError {
  DivergenceError(const std::string& what, long step)
      : NumericError(what), step_index(step) {}
  long step_index;
};

// Saddle-point gain extraction is ill posed: a required block inverse is
// past the condition threshold or S_vv lost positive definiteness.
struct SaddleIllPosed : NumericError {
  using NumericError::NumericError;
};

// gamma^2 I - L^T P L lost positive definiteness: the game has no value at
// the requested attenuation level.
struct GammaTooSmall : NumericError {
  using NumericError::NumericError;
};

struct SingularBlock : NumericError {
  using NumericError::NumericError;
};

struct MaxIterExceeded : NumericError {
  using NumericError::NumericError;
};

// Regression matrix lacks full column rank (insufficient excitation).
struct RankDeficient : NumericError {
  using NumericError::NumericError;
};

// The rank-one inverse-Gram update lost positive definiteness.
struct GramCorrupted : NumericError {
  using NumericError::NumericError;
};

struct Infeasible : NumericError {
  using NumericError::NumericError;
};

struct SolverStalled : NumericError {
  using NumericError::NumericError;
};

}  // namespace hinfq
