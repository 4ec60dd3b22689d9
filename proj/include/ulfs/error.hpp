#pragma once

#include <stdexcept>
#include <string>

namespace ulfs {

/// Broad failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind { Domain, Input, Numerical, Invariant };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid argument values: non-finite coordinates, bad config, non-positive weights.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(ErrorKind::Domain, what) {}
};

/// Malformed user input (files, CLI values).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

/// Numerical breakdown: overflow in the tilt, degenerate conditionals, failed fits.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

/// A runtime-checked property of the flow did not hold.
class InvariantViolation : public Error {
 public:
  InvariantViolation(std::string invariant, int iteration, const std::string& what)
      : Error(ErrorKind::Invariant, what), invariant_(std::move(invariant)), iteration_(iteration) {}
  const std::string& invariant() const noexcept { return invariant_; }
  int iteration() const noexcept { return iteration_; }

 private:
  std::string invariant_;
  int iteration_;
};

}  // namespace ulfs
