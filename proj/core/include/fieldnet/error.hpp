#pragma once

#include <stdexcept>
#include <string>

namespace fieldnet {

// Base for all library errors. The CLI maps the concrete subclass onto its
// exit code: ConfigError -> 1, DataError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, arguments, or preconditions violated by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable, malformed, or mismatched input data (files, images, archives).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or other numeric breakdowns during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fieldnet
