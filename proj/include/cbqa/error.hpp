#pragma once

#include <stdexcept>
#include <string>

namespace cbqa {

// Base of every error the library throws. `kind()` is a short machine-readable
// tag the CLI prints on its single error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

// Invalid user-supplied configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// Input record that violates a file schema.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& path, std::size_t line, const std::string& message)
      : Error("schema", path + ":" + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

// Violated operation precondition or internal invariant.
class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

}  // namespace cbqa
