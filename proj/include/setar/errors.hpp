#pragma once

#include <stdexcept>
#include <string>

namespace setar {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Precondition violated by the caller (bad shape, out-of-range ratio, ...).
class InvalidInput : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid_input"; }
};

/// Non-finite values or an iterative routine that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

/// Operation not available for this model flavour (e.g. text tower on a unimodal model).
class Unsupported : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "unsupported"; }
};

}  // namespace setar
