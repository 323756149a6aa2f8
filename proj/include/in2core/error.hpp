#pragma once

#include <stdexcept>
#include <string>

namespace in2core {

enum class ErrorCode {
  invalid_argument,     // bad config value or violated call precondition
  invariant_violation,  // data fails a structural invariant (NaN payload, bad ranks, ...)
  io_failure,           // missing path, unreadable or unwritable file
  corrupt_header,       // binary file does not start with a valid header
  dimension_mismatch,   // declared dims disagree with the payload actually present
  truncated_payload,    // file ends in the middle of an example record
  numerical,            // divergence, singular solve, non-finite result
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

// Exit statuses used by the command line tool.
//   0 success, 2 config/validation, 3 data format, 4 numerical
int exit_status_for(ErrorCode code);

}  // namespace in2core
