#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cytomix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input problems the user can fix by editing data or configuration.
/// The CLI maps this family to exit code 1.
class InputError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public InputError {
 public:
  using InputError::InputError;
};

/// A bad cell value. `row()` is the 1-based data row (header excluded).
class ValidationError : public InputError {
 public:
  ValidationError(std::size_t row, const std::string& what);
  explicit ValidationError(const std::string& what) : InputError(what) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_ = 0;
};

class FactorError : public InputError {
 public:
  using InputError::InputError;
};

class NotFoundError : public InputError {
 public:
  using InputError::InputError;
};

class ParameterError : public InputError {
 public:
  using InputError::InputError;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

/// The LLMM needs every donor observed under both conditions.
class PairingError : public InputError {
 public:
  using InputError::InputError;
};

/// Argument outside the support of a density or transform.
class DomainError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised when no chain can start from a finite point.
class InitializationError : public Error {
 public:
  using Error::Error;
};

}  // namespace cytomix
