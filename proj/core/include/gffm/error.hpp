#pragma once

#include <stdexcept>
#include <string>

namespace gffm {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { NotFound, BadMagic, Version, CorruptLength, ArchMismatch, Io };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Training produced a non-finite loss; carries the last step whose loss was finite (-1 if none).
class DivergenceError : public Error {
 public:
  DivergenceError(long last_finite_step, const std::string& what)
      : Error(what), last_finite_step_(last_finite_step) {}
  long last_finite_step() const noexcept { return last_finite_step_; }

 private:
  long last_finite_step_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gffm
