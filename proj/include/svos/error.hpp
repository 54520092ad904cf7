#pragma once

#include <stdexcept>
#include <string>

namespace svos {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents, channel counts or kernel sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value outside an operation's domain (log of a non-positive number, a
// non-binary mask, an empty mask where one is required).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape.
class TapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed manifest, image header or checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a loss becomes NaN or infinite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace svos
