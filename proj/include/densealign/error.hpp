#pragma once

#include <stdexcept>
#include <string>

namespace densealign {

// Error categories map one-to-one onto CLI exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Bad user input: malformed text, dataset lines, images, shapes.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Weight container could not be read or does not match the config.
class LoadError : public InputError {
 public:
  using InputError::InputError;
};

/// Invalid configuration or hyper-parameter.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Non-finite value or zero norm where a finite non-zero value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Broken internal invariant (e.g. token/span offsets disagree).
class InternalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace densealign
