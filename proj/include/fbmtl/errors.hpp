#pragma once

#include <stdexcept>
#include <string>

namespace fbmtl {

// Bad run configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Unreadable or malformed input data (CLI exit code 2).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite loss detected during training (CLI exit code 3).
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible tensor shapes; message names both operands.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace fbmtl
