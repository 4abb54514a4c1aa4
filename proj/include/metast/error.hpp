#pragma once

#include <stdexcept>
#include <string>

namespace metast {

// Exit codes surfaced by the command-line tool.
enum class ExitCode : int { ok = 0, config = 2, data = 3, numerical = 4 };

/// Dimension or rank mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A forward value became NaN or infinite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metast
