#pragma once

#include <stdexcept>
#include <string>

namespace specrig {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Problems with a capture configuration document.
class ConfigError : public Error {
 public:
  enum class Kind { syntax, schema, dangling_reference, overlap };

  ConfigError(Kind kind, std::string subject, const std::string& message)
      : Error(message), kind_(kind), subject_(std::move(subject)) {}

  Kind kind() const noexcept { return kind_; }
  // Field path, missing id or device name the error is about.
  const std::string& subject() const noexcept { return subject_; }

 private:
  Kind kind_;
  std::string subject_;
};

/// Device-server state machine violations (double initialize, capture while capturing).
class ConflictError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

/// Archive container problems. `dataset()` is empty for file-level errors.
class ArchiveError : public Error {
 public:
  enum class Kind { io, bad_magic, unsupported_version, corrupt_header, checksum, unknown_dataset };

  ArchiveError(Kind kind, std::string dataset, const std::string& message)
      : Error(message), kind_(kind), dataset_(std::move(dataset)) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& dataset() const noexcept { return dataset_; }

 private:
  Kind kind_;
  std::string dataset_;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class MetricsError : public Error {
 public:
  using Error::Error;
};

}  // namespace specrig
