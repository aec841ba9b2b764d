#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tract {

// Base of every error thrown by the library. kind() is the stable tag the CLI
// prints on stderr; exit_code() is what the CLI returns.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
  virtual int exit_code() const noexcept { return 1; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-argument"; }
  int exit_code() const noexcept override { return 2; }
};

// Closure target whose denominator vanishes (coincident noise levels).
class DegenerateTarget : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "degenerate-target"; }
  int exit_code() const noexcept override { return 3; }
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  const char* kind() const noexcept override { return "training-diverged"; }
  int exit_code() const noexcept override { return 4; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "checkpoint-format"; }
  int exit_code() const noexcept override { return 5; }
};

// Artifact built for a different schedule or architecture than requested.
class ConfigMismatch : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config-mismatch"; }
  int exit_code() const noexcept override { return 6; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
  int exit_code() const noexcept override { return 7; }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace tract
