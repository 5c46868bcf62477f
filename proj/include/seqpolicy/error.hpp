#pragma once

#include <stdexcept>
#include <string>

namespace seqpolicy {

enum class ErrorCode {
  kInvalidValue,
  kRange,
  kDomain,
  kSchema,
  kShape,
  kEmptyInput,
  kContract,
  kCapacity,
  kVersionMismatch,
  kTruncatedRecord,
  kChecksum,
  kExhausted,
  kConfig,
  kNumeric,
  kIo,
  kMissingGradient,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidValue:
      return "invalid-value";
    case ErrorCode::kRange:
      return "range";
    case ErrorCode::kDomain:
      return "domain";
    case ErrorCode::kSchema:
      return "schema";
    case ErrorCode::kShape:
      return "shape";
    case ErrorCode::kEmptyInput:
      return "empty-input";
    case ErrorCode::kContract:
      return "contract-violation";
    case ErrorCode::kCapacity:
      return "capacity";
    case ErrorCode::kVersionMismatch:
      return "version-mismatch";
    case ErrorCode::kTruncatedRecord:
      return "truncated-record";
    case ErrorCode::kChecksum:
      return "checksum";
    case ErrorCode::kExhausted:
      return "exhausted";
    case ErrorCode::kConfig:
      return "config";
    case ErrorCode::kNumeric:
      return "numeric";
    case ErrorCode::kIo:
      return "io";
    case ErrorCode::kMissingGradient:
      return "missing-gradient";
  }
  return "unknown";
}

// Every failure in the library surfaces as an Error carrying a code, so
// callers (the CLI in particular) can map failures to exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + " error: " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace seqpolicy
