#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cocomix {

// Error classes double as the CLI's machine-parsable failure categories.
enum class ErrorClass {
  kShape,
  kNonFinite,
  kRange,
  kConfig,
  kMissingPrerequisite,
  kDivergence,
  kFormat,
};

std::string_view error_class_name(ErrorClass cls);

// Process exit code for a failure of this class: 2 config, 3 missing
// prerequisite, 4 numerical divergence, 1 anything else.
int exit_code_for(ErrorClass cls);

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& message)
      : std::runtime_error(message), class_(cls) {}

  ErrorClass error_class() const { return class_; }

 private:
  ErrorClass class_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorClass::kShape, m) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& m)
      : Error(ErrorClass::kNonFinite, m) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& m) : Error(ErrorClass::kRange, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorClass::kConfig, m) {}
};

class MissingPrerequisiteError : public Error {
 public:
  explicit MissingPrerequisiteError(const std::string& m)
      : Error(ErrorClass::kMissingPrerequisite, m) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& m)
      : Error(ErrorClass::kDivergence, m) {}
};

// Corrupt or mismatched on-disk artifact (bad magic, hash mismatch, ...).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& m) : Error(ErrorClass::kFormat, m) {}
};

}  // namespace cocomix
