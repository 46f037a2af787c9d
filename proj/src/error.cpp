#include "uat/error.hpp"

namespace uat {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kInvalidConfig: return "invalid config";
    case ErrorCode::kOutOfVocabulary: return "out of vocabulary";
    case ErrorCode::kEmptyInput: return "empty input";
    case ErrorCode::kNumerical: return "numerical failure";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kFormat: return "format error";
  }
  return "unknown";
}

}  // namespace uat
