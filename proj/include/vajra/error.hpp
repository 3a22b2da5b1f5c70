#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vajra {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor geometry, channel arithmetic or group mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed model configuration. Carries a 1-based source position when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::size_t line = 0, std::size_t column = 0)
      : Error(line == 0 ? msg
                        : "line " + std::to_string(line) + ", column " + std::to_string(column) +
                              ": " + msg),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

/// Corrupt or unreadable weight/tensor file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace vajra
