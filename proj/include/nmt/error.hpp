#pragma once

#include <stdexcept>
#include <string>

namespace nmt {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A token id or position is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or option value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Parallel inputs (corpus sides, hypothesis/reference lists) differ in length.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// The requested operation needs a capability the architecture lacks.
class UnsupportedArchitecture : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace nmt
