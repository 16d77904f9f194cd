#ifndef DCSAU_ERROR_HPP
#define DCSAU_ERROR_HPP

#include <stdexcept>
#include <string>

namespace dcsau {

// Each family maps onto one CLI exit code: config 2, data 3, divergence 4.

/// Incompatible extents; the message names the offending axis.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary record (tensor, archive, netpbm).
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf encountered in loss or gradients.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dcsau

#endif  // DCSAU_ERROR_HPP
