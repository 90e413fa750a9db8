#pragma once

#include <stdexcept>
#include <string>

namespace multiwin {

/// A sampler spec that violates its own preconditions (budget over capacity,
/// empty ranges, out-of-grid shapes).
struct InvalidSpec : std::runtime_error {
  explicit InvalidSpec(const std::string& msg) : std::runtime_error("InvalidSpec: " + msg) {}
};

/// A valid spec for which no non-overlapping placement could be found, even
/// by the deterministic packing fallback.
struct InfeasibleSpec : std::runtime_error {
  explicit InfeasibleSpec(const std::string& msg) : std::runtime_error("InfeasibleSpec: " + msg) {}
};

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& msg) : std::runtime_error("ShapeMismatch: " + msg) {}
};

/// Raised by losses/metrics when no pixel is supervised.
struct EmptyMask : std::runtime_error {
  explicit EmptyMask(const std::string& msg) : std::runtime_error("EmptyMask: " + msg) {}
};

/// Convolutional head requires every window side to cover the kernel reach.
struct WindowTooSmall : std::runtime_error {
  explicit WindowTooSmall(const std::string& msg) : std::runtime_error("WindowTooSmall: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("ConfigError: " + msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

}  // namespace multiwin
