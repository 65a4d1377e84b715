#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace difftraj {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument values (ranges, sizes, unknown tags).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A valid argument outside the domain an operation is defined on (e.g. t=0 for the score).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Time arguments given in the wrong order.
class OrderingError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure that should not happen with valid inputs.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Integration produced a non-finite or exploding state.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericalError("divergence at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// File-format level errors for the binary containers and reports.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedDtypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Structurally well-formed data that violates an invariant (e.g. non-monotone times).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Experiment configuration problems; `key` is the dotted path of the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace difftraj
