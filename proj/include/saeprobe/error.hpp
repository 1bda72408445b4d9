#pragma once

#include <stdexcept>
#include <string>

namespace saeprobe {

// Base of every error raised by the library. The CLI maps the three
// families below onto exit codes 1, 2 and 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments: out-of-range k, mismatched dimensions, invalid configs.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class PayloadLengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class LabelCountError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnknownSplitError : public FormatError {
 public:
  using FormatError::FormatError;
};

class InvariantError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Divergence, non-finite values, degenerate inputs to an optimizer.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace saeprobe
