#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cem {

/// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Row or element index outside a tensor.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a forward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or impossible generator setting.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong object state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed rule text. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Corrupt or truncated file. Carries the offending path.
class FormatError : public Error {
 public:
  FormatError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace cem
