#pragma once

#include <stdexcept>
#include <string>

namespace hff {

// Raised when a caller violates an operation's preconditions (bad shapes,
// invalid labels, degenerate inputs). Maps to CLI exit code 1.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised on file-system and codec failures. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

}  // namespace hff
