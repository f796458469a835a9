#pragma once

#include <stdexcept>
#include <string>

namespace act {

/// Invalid arguments or configuration supplied by the caller (CLI exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A placeholder gap larger than the model's K_max.
class KmaxOverflow : public DataError {
 public:
  using DataError::DataError;
};

/// Training loss became NaN/inf (CLI exit code 3).
class NumericDivergence : public std::runtime_error {
 public:
  NumericDivergence(const std::string& what, long step)
      : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace act
