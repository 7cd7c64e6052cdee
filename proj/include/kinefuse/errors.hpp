#pragma once

#include <stdexcept>
#include <string>

namespace kinefuse {

/// Invalid configuration, descriptor or command-line usage.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values or a diverged optimization.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File system and parse failures of input/output artifacts.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kinefuse
