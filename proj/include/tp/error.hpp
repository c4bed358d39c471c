#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tp {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape mismatch, asymmetric input...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Requested subspace dimension exceeds the numerical rank of the data.
class RankError : public DimensionError {
 public:
  RankError(const std::string& what, std::size_t achievable)
      : DimensionError(what), achievable_(achievable) {}
  std::size_t achievable_rank() const { return achievable_; }

 private:
  std::size_t achievable_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent data handed to a writer.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  enum class Kind { kHeader, kVersion, kSyntax, kDimension, kOffset, kTruncated };

  ParseError(Kind kind, std::size_t record, const std::string& what)
      : Error("record " + std::to_string(record) + ": " + what), kind_(kind), record_(record) {}

  Kind kind() const { return kind_; }
  std::size_t record() const { return record_; }

 private:
  Kind kind_;
  std::size_t record_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EmptySplitError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch)
      : TrainingError(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Every input of an operation degenerated (e.g. all states equal to their mean).
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

class ScriptError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace tp
