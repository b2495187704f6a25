#pragma once

#include <stdexcept>
#include <string>

namespace lvt {

// Base for every error raised by the library. The CLI maps ValidationError
// to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: config values, shapes of supplied data, CLI usage.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shape or extent mismatch at an op boundary.
class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed corpus or checkpoint bytes.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// NaN/Inf produced by a forward op or a training step.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the differentiation tape (stale tape, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lvt
