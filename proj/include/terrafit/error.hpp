#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace terrafit {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (CSV rows, grid files). Carries the offending line.
class InputError : public Error {
 public:
  InputError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit InputError(const std::string& what) : Error(what), line_(0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid configuration or arguments. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Cholesky factorization hit a non-positive pivot.
class NotPositiveDefinite : public Error {
 public:
  explicit NotPositiveDefinite(std::ptrdiff_t pivot)
      : Error("matrix not positive definite (pivot " + std::to_string(pivot) + ")"),
        pivot_(pivot) {}

  /// Index of the failing pivot in the original (unpermuted) ordering.
  std::ptrdiff_t pivot() const noexcept { return pivot_; }

 private:
  std::ptrdiff_t pivot_;
};

/// Dimension mismatch between conformable operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

}  // namespace terrafit
