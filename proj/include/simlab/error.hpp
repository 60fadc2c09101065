#pragma once

#include <stdexcept>
#include <string>

namespace simlab {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated interchange file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// An object violates one of its invariants (non-finite entry, duplicate id, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation precondition (size mismatch, too few rows, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Input is valid but degenerate for the requested computation (zero matrix,
/// zero bandwidth, rank-0 input, empty projector).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A pipeline step was run before the step that produces its inputs.
class DependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace simlab
