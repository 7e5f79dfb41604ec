#pragma once

#include <stdexcept>
#include <string>

namespace slu {

/// Base for every error raised by the library. `exit_code()` is what the CLI returns.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid configuration (bad hyperparameter, unknown key, even kernel width ...).
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Malformed or misaligned input data.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// NaN/Inf during training or a degenerate numerical input.
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Softmax row with every position masked out.
class DegenerateMaskError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace slu
