#pragma once

#include <stdexcept>
#include <string>

namespace gradnoise {

// Root of all library errors. The CLI maps ConfigError/InvalidInputError/
// CapabilityError to exit code 2 and the numerical family to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class CapabilityError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Raised when a curvature eigenvalue reaches 2/eta, where the stationary
// closed forms stop describing a contracting chain.
class EdgeOfStabilityError : public NumericalError {
 public:
  EdgeOfStabilityError(const std::string& what, double eigenvalue, double threshold)
      : NumericalError(what), eigenvalue_(eigenvalue), threshold_(threshold) {}

  double eigenvalue() const { return eigenvalue_; }
  double threshold() const { return threshold_; }

 private:
  double eigenvalue_;
  double threshold_;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace gradnoise
