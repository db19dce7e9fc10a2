#pragma once

#include <stdexcept>
#include <string>

namespace nre {

enum class ErrorCode {
  kDimension,
  kIndex,
  kContract,
  kDegenerateInput,
  kSpanTruncated,
  kInvalidSpan,
  kData,
  kIo,
  kFormat,
  kConfig,
  kMetric,
  kSampling,
  kDuplicateId,
  kNaPosition,
  kIdGap,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kVocabHashMismatch,
  kDiverged,
  kModelNotLoaded,
};

const char* error_code_name(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace nre
