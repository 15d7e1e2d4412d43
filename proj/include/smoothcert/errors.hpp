#ifndef SMOOTHCERT_ERRORS_HPP
#define SMOOTHCERT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace smoothcert {

/// Caller passed tensors whose shapes cannot be combined.
class ShapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// An API was used outside its contract (backward twice, detached graph, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input file is missing, truncated, or malformed.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or certification hit a non-finite value it cannot recover from.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace smoothcert

#endif  // SMOOTHCERT_ERRORS_HPP
