#pragma once

#include <stdexcept>
#include <string>

namespace occdiff {

/// A precondition on arguments or configuration was violated.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The operation is not available for this path or configuration.
class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Reading or writing a file failed, or a file is malformed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN or infinity showed up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw SpecError(msg);
}

}  // namespace occdiff
