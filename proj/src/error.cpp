#include "nre/error.hpp"

namespace nre {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kIndex: return "index";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kDegenerateInput: return "degenerate_input";
    case ErrorCode::kSpanTruncated: return "span_truncated";
    case ErrorCode::kInvalidSpan: return "invalid_span";
    case ErrorCode::kData: return "data";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kMetric: return "metric";
    case ErrorCode::kSampling: return "sampling";
    case ErrorCode::kDuplicateId: return "duplicate_id";
    case ErrorCode::kNaPosition: return "na_position";
    case ErrorCode::kIdGap: return "id_gap";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kVocabHashMismatch: return "vocab_hash_mismatch";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kModelNotLoaded: return "model_not_loaded";
  }
  return "unknown";
}

}  // namespace nre
