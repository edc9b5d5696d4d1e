#pragma once

#include <stdexcept>
#include <string>

namespace gcalab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside a table or vocabulary.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition that is not about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A softmax slice had no unmasked entries.
class DegenerateSliceError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, data or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity detected in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

/// Parameter matching could not reach the requested tolerance.
class InfeasibleMatchError : public Error {
 public:
  InfeasibleMatchError(const std::string& what, long long nearest_params, int nearest_d)
      : Error(what), nearest_params_(nearest_params), nearest_d_(nearest_d) {}
  long long nearest_params() const noexcept { return nearest_params_; }
  int nearest_d() const noexcept { return nearest_d_; }

 private:
  long long nearest_params_;
  int nearest_d_;
};

/// Correlation requested on a series with zero variance.
class UndefinedCorrelationError : public Error {
 public:
  using Error::Error;
};

}  // namespace gcalab
