#pragma once

#include <stdexcept>
#include <string>

namespace gpldan {

// Every error carries the module it came from so the CLI can report provenance.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericDomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// d_mean of a mini-batch is zero, so reference distances are undefined.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, count_mismatch, non_finite, parse };

  LoadError(Kind kind, const std::string& what) : Error("data_io", what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace gpldan
