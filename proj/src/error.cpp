#include "ctxseg/error.hpp"

namespace ctxseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::state: return "state";
    case ErrorCode::io: return "io";
    case ErrorCode::parse: return "parse";
    case ErrorCode::unsupported_format: return "unsupported_format";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::duplicate_label: return "duplicate_label";
    case ErrorCode::missing_label: return "missing_label";
    case ErrorCode::unknown_label: return "unknown_label";
    case ErrorCode::transport: return "transport";
    case ErrorCode::timeout: return "timeout";
    case ErrorCode::malformed_response: return "malformed_response";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::unsupported_version: return "unsupported_version";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::config: return "config";
    case ErrorCode::vocab_mismatch: return "vocab_mismatch";
    case ErrorCode::placement: return "placement";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace ctxseg
