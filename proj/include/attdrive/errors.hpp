#pragma once

#include <stdexcept>
#include <string>

namespace attdrive {

// Dimension or geometry mismatch (bad tensor shapes, degenerate rects, ...).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (losses, gradients, ...).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem / serialization trouble.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration (unknown key, unparsable value, inconsistent combo).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Simulator-level contract violations (unreachable goals, broken routes, ...).
struct SimError : std::runtime_error {
  explicit SimError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace attdrive
