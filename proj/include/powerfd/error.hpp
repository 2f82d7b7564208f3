#pragma once

#include <stdexcept>
#include <string>

namespace powerfd {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Profile steps are not contiguous.
class StepGapError : public ParseError {
 public:
  using ParseError::ParseError;
};

/// Model or plan violates an invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver ran out of iterations.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// Power-flow mismatch grew for several consecutive iterations.
class DivergenceError : public ConvergenceError {
 public:
  using ConvergenceError::ConvergenceError;
};

/// Measurement plan does not determine the state (gain matrix rank-deficient).
class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// File format version or configuration does not match what the reader expects.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Binary file written by an unknown format version.
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Checkpoint written for a different model configuration.
class ConfigMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Requested day split does not fit the available data.
class InsufficientDaysError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// No perturbation within the bracket reaches the requested injection-change range.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// Target bus injection too small for a relative change rate to be meaningful.
class NearZeroInjectionError : public CalibrationError {
 public:
  using CalibrationError::CalibrationError;
};

/// Training loss became non-finite.
class DivergedTrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace powerfd
