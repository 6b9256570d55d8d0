#pragma once

#include <stdexcept>
#include <string>

namespace rcal {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data: malformed records, unresolvable ids, empty inputs.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad parameters: out-of-range knobs, missing required options.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace rcal
