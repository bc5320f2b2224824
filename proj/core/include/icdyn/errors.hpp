#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace icdyn {

// Caller-side contract violations: bad shapes, out-of-range indices, empty inputs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A numerical procedure failed (blowup, non-convergence, non-finite values).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrationBlowup : public NumericalError {
 public:
  IntegrationBlowup(const std::string& what, double time)
      : NumericalError(what), time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

class ConvergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Training hit a non-finite loss or gradient.
class TrainingAbort : public NumericalError {
 public:
  TrainingAbort(const std::string& what, long step, std::string last_checkpoint)
      : NumericalError(what), step_(step), last_checkpoint_(std::move(last_checkpoint)) {}
  long step() const noexcept { return step_; }
  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  long step_;
  std::string last_checkpoint_;
};

// Malformed files on disk (manifests, blobs, CSV).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace icdyn
