#pragma once

#include <stdexcept>
#include <string>

namespace uat {

/// Failure classes. The CLI maps these onto distinct exit codes.
enum class ErrorCode {
  kDimensionMismatch,
  kInvalidArgument,
  kInvalidConfig,
  kOutOfVocabulary,
  kEmptyInput,
  kNumerical,
  kIo,
  kFormat,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace uat
