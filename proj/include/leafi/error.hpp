#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace leafi {

/// Base class for every error raised by the library. `kind()` is a short
/// machine-readable tag that the CLI prints in its error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error("invalid-input", what) {}
};

/// A training-data plan that cannot be executed (for example, no calibration
/// queries).
class InvalidPlan : public Error {
 public:
  explicit InvalidPlan(const std::string& what) : Error("invalid-plan", what) {}
};

class DegenerateInput : public Error {
 public:
  explicit DegenerateInput(const std::string& what)
      : Error("degenerate-input", what) {}
};

/// Malformed or truncated file. `offset` is the byte position where parsing
/// gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error("format", what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& what) : Error("checksum", what) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("training", what) {}
};

class MeasurementError : public Error {
 public:
  explicit MeasurementError(const std::string& what)
      : Error("measurement", what) {}
};

/// An artifact directory still carries the marker of an unfinished run.
class IncompleteError : public Error {
 public:
  explicit IncompleteError(const std::string& what) : Error("incomplete", what) {}
};

class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::string& what) : Error("missing-artifact", what) {}
};

/// A pipeline stage failed; `stage()` names it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage", stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace leafi
