#pragma once

#include <stdexcept>
#include <string>

namespace nestseg {

// Root of every error the toolkit throws. The CLI maps each family to its
// own exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid parameters, malformed configuration, violated preconditions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Two containers whose shapes or channel counts must agree do not.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Problems with data on disk.
class DataError : public Error {
 public:
  using Error::Error;
};

class CorruptHeaderError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedPayloadError : public DataError {
 public:
  using DataError::DataError;
};

class HeaderMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class DtypeMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  return kExitInternal;
}

namespace detail {

template <typename E = ConfigError>
inline void require(bool cond, const std::string& what) {
  if (!cond) throw E(what);
}

}  // namespace detail

}  // namespace nestseg
