#pragma once

#include <stdexcept>
#include <string>

namespace panicl {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kFormat = 3,
  kDimension = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kFailure; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kFormat; }
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DimensionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kDimension; }
};

/// A probability vector failed validation (negative entry, bad mass).
class ValidationError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class MissingItemError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

/// Raised for inputs where the requested quantity has no meaning
/// (all-zero feature maps, all-infinite distances, empty metric sets).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

}  // namespace panicl
