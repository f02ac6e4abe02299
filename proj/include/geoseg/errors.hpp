#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace geoseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; `line()` is 1-based, 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Unknown or invalid configuration key/value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes that cannot be combined.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ClassMismatchError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace geoseg
