#pragma once

#include <stdexcept>
#include <string>

namespace memecap {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Input failed a domain invariant (bad label, out-of-range value, ...).
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// A record could not be loaded (missing or unreadable file).
class LoadError : public Error {
  public:
    LoadError(std::string record_id, const std::string &what)
        : Error(what), record_id_(std::move(record_id)) {}
    const std::string &record_id() const { return record_id_; }

  private:
    std::string record_id_;
};

class SegmentationError : public Error {
  public:
    using Error::Error;
};

/// Two tensors or maps disagree on shape.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// A numeric computation produced NaN or infinity.
class NumericError : public Error {
  public:
    using Error::Error;
};

/// A pipeline stage was run before one of its upstream stages.
class DependencyError : public Error {
  public:
    DependencyError(std::string missing_stage, const std::string &what)
        : Error(what), missing_stage_(std::move(missing_stage)) {}
    const std::string &missing_stage() const { return missing_stage_; }

  private:
    std::string missing_stage_;
};

class NotFoundError : public Error {
  public:
    using Error::Error;
};

class ConflictError : public Error {
  public:
    using Error::Error;
};

} // namespace memecap
