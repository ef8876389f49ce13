#pragma once

#include <stdexcept>
#include <string>

namespace sdrop {

// Every failure the library reports derives from Error. The CLI maps
// DomainError (and its subclasses) to exit code 3 and everything else to 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Malformed container: bad magic, unsupported version, truncated payload.
struct FormatError : Error {
  using Error::Error;
};

struct ChecksumError : FormatError {
  using FormatError::FormatError;
};

// Width / policy problems: a request that is well-formed but outside what
// the model admits.
struct DomainError : Error {
  using Error::Error;
};

struct PruneError : DomainError {
  using DomainError::DomainError;
};

struct InfeasibleError : DomainError {
  using DomainError::DomainError;
};

}  // namespace sdrop
