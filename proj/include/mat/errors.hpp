#pragma once

#include <stdexcept>
#include <string>

namespace mat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, masks or option values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files (checkpoints, corpora, configs).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Token ids or sequences outside what the model or vocabulary accepts.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace mat
