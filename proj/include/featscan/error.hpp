#pragma once

#include <stdexcept>
#include <string>

namespace featscan {

enum class ErrorCode {
  kInvalidArgument,
  kNotFound,
  kAlreadyExists,
  kIo,
  kCorruption,
  kParse,
  kEmptyQuery,
  kDegenerateQuery,
  kInternal,
};

const char* error_code_name(ErrorCode code) noexcept;

// All library failures surface as this exception; the C API maps the code to
// an fscan_status value.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace featscan
