#pragma once

#include <stdexcept>
#include <string>

namespace dgpo {

// Every error carries a short machine-readable class ("input", "numeric", ...)
// that the command-line tool prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string error_class, const std::string& what)
      : std::runtime_error(what), class_(std::move(error_class)) {}

  const std::string& error_class() const noexcept { return class_; }

 private:
  std::string class_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class SetupError : public Error {
 public:
  explicit SetupError(const std::string& what) : Error("setup", what) {}
};

class FileError : public Error {
 public:
  explicit FileError(const std::string& what) : Error("file", what) {}
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config", key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace dgpo
