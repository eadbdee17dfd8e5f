#include "cocomix/error.hpp"

namespace cocomix {

std::string_view error_class_name(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::kShape:
      return "shape_error";
    case ErrorClass::kNonFinite:
      return "non_finite";
    case ErrorClass::kRange:
      return "range_error";
    case ErrorClass::kConfig:
      return "config_error";
    case ErrorClass::kMissingPrerequisite:
      return "missing_prerequisite";
    case ErrorClass::kDivergence:
      return "numerical_divergence";
    case ErrorClass::kFormat:
      return "format_error";
  }
  return "unknown";
}

int exit_code_for(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::kConfig:
      return 2;
    case ErrorClass::kMissingPrerequisite:
      return 3;
    case ErrorClass::kDivergence:
    case ErrorClass::kNonFinite:
      return 4;
    default:
      return 1;
  }
}

}  // namespace cocomix
