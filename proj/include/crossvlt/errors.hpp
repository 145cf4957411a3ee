#pragma once

#include <stdexcept>
#include <string>

namespace crossvlt {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A ModelConfig or TrainConfig violates one of its invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes disagree with what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf input, or a degenerate mask that leaves a softmax with no support.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation was called in a mode or state that does not support it.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (unknown token, out-of-vocabulary id, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace crossvlt
