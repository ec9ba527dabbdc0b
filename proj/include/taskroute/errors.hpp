#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace taskroute {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid shapes, hyper-parameters or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse: out-of-range task, backward twice, missing gradient, ...
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Labels or targets that violate the data contract.
class DataError : public Error {
 public:
  using Error::Error;
};

class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// A value became NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ExtractionError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or routing map could not be loaded (missing file, mismatch).
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text input; carries the byte offset of the failure.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace taskroute
