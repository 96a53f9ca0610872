#pragma once

#include <stdexcept>
#include <string>

namespace spattn {

/// Base class for every error raised by the library. The C API maps the
/// concrete subclass onto a status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an API call was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration; message names the offending field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file.
class IoError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace spattn
