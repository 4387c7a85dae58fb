#pragma once

#include <stdexcept>
#include <string>

namespace autobot {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for an operator.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside the domain an operation accepts (bad attribute, bad label,
/// non-finite input, invalid configuration).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Graph structure problem: unknown node, cycle, ambiguous channel coupling.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace autobot
