#pragma once

#include <stdexcept>
#include <string>

namespace corc {

// Base class for all domain errors raised by this library. Contract
// violations that indicate caller bugs (bad eps, non-finite inputs) throw
// std::invalid_argument instead.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A calibration loss exceeded the worst-case bound at some lambda.
class BoundViolation : public Error {
 public:
  using Error::Error;
};

// Calibration requires a loss to be nondecreasing and it is not.
class MonotonicityViolation : public Error {
 public:
  using Error::Error;
};

class EmptyCalibration : public Error {
 public:
  using Error::Error;
};

class EmptySamples : public Error {
 public:
  using Error::Error;
};

class EmptyGrid : public Error {
 public:
  using Error::Error;
};

// Disutility evaluation overflowed (entropic kind with a huge argument).
class NonFiniteObjective : public Error {
 public:
  using Error::Error;
};

// Two step thresholds coincide; the piecewise gradient is undefined there.
class TieDetected : public Error {
 public:
  using Error::Error;
};

// A sample sits on the disutility kink; second derivatives are undefined.
class KinkAtSolution : public Error {
 public:
  using Error::Error;
};

class SingularKkt : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class NoPositivePixels : public Error {
 public:
  using Error::Error;
};

class NoNegativePixels : public Error {
 public:
  using Error::Error;
};

class BatchTooSmall : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Instance falls outside the supported gradient cases.
class Unsupported : public Error {
 public:
  using Error::Error;
};

}  // namespace corc
