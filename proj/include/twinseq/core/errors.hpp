#pragma once

#include <stdexcept>
#include <string>

namespace twinseq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes or sequence lengths do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, or a non-deterministic objective.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, precondition, or file content.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace twinseq
