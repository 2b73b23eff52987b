#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctxseg {

// Stable, machine-parsable error categories. The CLI prints
// `error: <code>: <message>` using to_string(code).
enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  non_finite,
  state,
  io,
  parse,
  unsupported_format,
  truncated,
  dimension_mismatch,
  duplicate_label,
  missing_label,
  unknown_label,
  transport,
  timeout,
  malformed_response,
  bad_magic,
  unsupported_version,
  checksum,
  config,
  vocab_mismatch,
  placement,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace ctxseg
