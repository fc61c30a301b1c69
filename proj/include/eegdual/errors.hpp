#ifndef EEGDUAL_ERRORS_HPP
#define EEGDUAL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace eegdual {

// Error taxonomy mapped onto CLI exit codes:
//   UsageError -> 1, DataError/ConfigError -> 2, NumericalError -> 3.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad command usage or API misuse (non-scalar loss, consumed tape, ...).
class UsageError : public Error {
public:
  using Error::Error;
};

// Malformed or inconsistent input data (CSV cells, layout lines, model bytes).
class DataError : public Error {
public:
  using Error::Error;
};

// Invalid configuration (band above Nyquist, alpha outside [0,1], ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Tensor shape mismatches.
class DimensionError : public Error {
public:
  using Error::Error;
};

// Stateful component used before initialization (batch-norm eval stats).
class StateError : public Error {
public:
  using Error::Error;
};

// NaN/Inf encountered where the pipeline requires finite values.
class NumericalError : public Error {
public:
  using Error::Error;
};

}  // namespace eegdual

#endif
