#pragma once

#include <stdexcept>
#include <string>

namespace hsi {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad magic, truncated header, unknown version).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dimension or length mismatch between arguments or between header and payload.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid or incomplete configuration, detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsi
