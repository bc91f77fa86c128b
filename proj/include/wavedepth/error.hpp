#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace wavedepth {

// Violated precondition of a public operation (bad shapes, bad config).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operator received operands whose extents do not fit together.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Mathematical domain violation: log/sqrt of a non-positive value,
// non-positive depth in a metric, non-finite loss.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A frame or subset that cannot be used (empty validity mask, no pairs).
class UnusableFrameError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wavedepth
