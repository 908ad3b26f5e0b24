#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace fmnas {

namespace detail {
template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape / dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or numeric failure (non-finite loss, bad label, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// File or wire-format problem.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Run-configuration validation failure.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmnas
