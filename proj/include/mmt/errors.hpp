// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mmt {

// Base for every error raised by the library. The CLI maps subclasses to
// distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (dataset records, embeddings,
// labels, boundaries).
class DataError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A checkpoint whose stored configuration disagrees with the requested one.
class VersionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmt
