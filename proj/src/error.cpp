#include "featscan/error.hpp"

namespace featscan {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kAlreadyExists: return "already_exists";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kCorruption: return "corruption";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kEmptyQuery: return "empty_mask";
    case ErrorCode::kDegenerateQuery: return "degenerate_query";
    case ErrorCode::kInternal: return "internal";
  }
  return "internal";
}

}  // namespace featscan
