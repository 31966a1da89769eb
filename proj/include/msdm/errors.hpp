#pragma once

#include <stdexcept>
#include <string>

namespace msdm {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke an operation precondition (wrong rank, out-of-range index, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad configuration value or unknown identifier. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf crossed an op boundary. Training loops report it as divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientSamplesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training loss went non-finite. Maps to CLI exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace msdm
