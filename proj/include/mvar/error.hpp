#pragma once

#include <stdexcept>
#include <string>

namespace mvar {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents that do not line up (matmul inner dims, grid sizes, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition that is not about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN/Inf, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Missing or malformed on-disk input (dataset, image, config).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Stored parameter does not match the shape the config expects.
class CheckpointShapeError : public CheckpointError {
 public:
  CheckpointShapeError(std::string parameter, const std::string& what)
      : CheckpointError(what), parameter_(std::move(parameter)) {}
  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

}  // namespace mvar
