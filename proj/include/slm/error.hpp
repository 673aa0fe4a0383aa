#pragma once

#include <stdexcept>
#include <string>

namespace slm {

// Root of every error thrown by the library. The CLI maps the subclasses
// onto exit codes (see tools/slm_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's contract (invalid ordering, bad span, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Exponential enumeration or integer range guard tripped.
class SizeLimitError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad configuration values or unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable files, malformed corpora, out-of-vocabulary input.
class DataError : public Error {
 public:
  using Error::Error;
};

class MalformedSequenceError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace slm
