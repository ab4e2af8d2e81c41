#pragma once

#include <stdexcept>
#include <string>

namespace ovseg {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A vector whose norm is too small to normalize.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// More ground-truth items than queries.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced at an op boundary.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Malformed file (checkpoint, image, template list).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace ovseg
