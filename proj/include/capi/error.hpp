#pragma once

#include <stdexcept>
#include <string>

namespace capi {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration or specification value is out of its valid range.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Array or lattice dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Inputs for which the math is undefined (zero-norm rows, non-finite values).
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace capi
