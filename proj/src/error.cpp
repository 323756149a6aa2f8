#include "in2core/error.hpp"

namespace in2core {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invariant_violation: return "invariant_violation";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::corrupt_header: return "corrupt_header";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::truncated_payload: return "truncated_payload";
    case ErrorCode::numerical: return "numerical";
  }
  return "unknown";
}

int exit_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::invariant_violation:
      return 2;
    case ErrorCode::io_failure:
    case ErrorCode::corrupt_header:
    case ErrorCode::dimension_mismatch:
    case ErrorCode::truncated_payload:
      return 3;
    case ErrorCode::numerical:
      return 4;
  }
  return 1;
}

}  // namespace in2core
