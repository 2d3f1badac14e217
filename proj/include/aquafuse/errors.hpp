#pragma once

#include <stdexcept>
#include <string>

namespace aquafuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File contents are not a supported raster format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Tensor or image extents incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace aquafuse
