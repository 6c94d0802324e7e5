#pragma once

#include <stdexcept>
#include <string>

namespace esup {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kArgument = 2,
  kConvergence = 3,
  kDivergence = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kFailure; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kArgument; }
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Raised when a non-finite value shows up in parameters or losses.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kDivergence; }
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ArgumentError(what);
}

}  // namespace esup
