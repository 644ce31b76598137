#pragma once

#include <stdexcept>
#include <string>

namespace ctxpatch {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A region, placement, or coordinate falls outside the image it refers to.
class BoundsError : public Error {
 public:
  using Error::Error;
};

/// Two operands that must share dimensions do not.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument violates an operation precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A dataset, checkpoint, or image file could not be loaded or written.
class IoError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

/// The detector did not reach its clean-confidence gate.
class UnderTrainedError : public Error {
 public:
  UnderTrainedError(const std::string& what, double achieved)
      : Error(what), achieved_(achieved) {}
  double achieved() const noexcept { return achieved_; }

 private:
  double achieved_;
};

/// A loss or gradient became NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Configuration failed validation; `path()` is the JSON pointer of the offending value.
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error(what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// A command needs an artifact produced by an upstream command.
class MissingArtifact : public Error {
 public:
  MissingArtifact(std::string path, const std::string& what)
      : Error(what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace ctxpatch
