#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace nimbus {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid network / training / threshold configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a tensor the tape never produced.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A problem with an input file. Carries the offending path.
class DatasetError : public Error {
 public:
  DatasetError(std::string path, const std::string& message)
      : Error(path + ": " + message), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrorKind { Io, BadMagic, VersionMismatch, Truncated, Malformed };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message)
      : Error(message), kind_(kind) {}

  CheckpointErrorKind kind() const noexcept { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace nimbus
