#pragma once

#include <stdexcept>
#include <string>

namespace ftrlab {

// Base class for everything thrown on purpose by this library. The CLI maps
// ConfigError to exit code 1 and every other Error to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or missing user input: config files, units, command-line values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A physical-domain violation: parameters outside their admissible range,
// or an evaluation at a point where the model diverges.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Root finding or iteration failed to converge.
class SolverError : public Error {
 public:
  using Error::Error;
};

// Degenerate or ill-posed geometry (touching loops, zero-length segments).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Numerical integration stopped short of the requested tolerance; the
// message carries the achieved error estimate alongside the value.
class QuadratureError : public SolverError {
 public:
  using SolverError::SolverError;
};

// Least-squares extraction failed; carries the iteration trace for forensics.
class FitError : public Error {
 public:
  FitError(const std::string& msg, std::string trace)
      : Error(msg), trace_(std::move(trace)) {}
  explicit FitError(const std::string& msg) : Error(msg) {}
  const std::string& trace() const { return trace_; }

 private:
  std::string trace_;
};

// Flux-axis calibration problems (no usable period, inconsistent mutuals).
class CalibrationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ftrlab
