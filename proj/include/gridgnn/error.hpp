#pragma once

#include <stdexcept>
#include <string>

namespace gridgnn {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or feature shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Topology or configuration document failed validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Singular systems, non-finite values and similar numerical breakdowns.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; carries the epoch and batch where the loss went non-finite.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : Error(what), epoch_(epoch), batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace gridgnn
