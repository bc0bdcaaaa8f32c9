#pragma once

#include <stdexcept>
#include <string>

namespace cnuav {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or out-of-range configuration; `key()` names the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// A numerical model became degenerate (singular covariance, zero weights...).
class ModelError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& key, const std::string& what) {
  if (!cond) throw ConfigError(key, what);
}

}  // namespace cnuav
