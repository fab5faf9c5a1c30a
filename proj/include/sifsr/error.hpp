#pragma once

#include <stdexcept>
#include <string>

namespace sifsr {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or violated precondition on caller-supplied values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing files, malformed payloads, shape mismatches between rasters.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses, singular systems that could not be recovered.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sifsr
