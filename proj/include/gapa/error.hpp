#pragma once

#include <stdexcept>
#include <string>

namespace gapa {

enum class ErrorCode {
  kDimensionMismatch,
  kNotPositiveDefinite,
  kNegativeVariance,
  kInvalidArgument,
  kSchemaVersionUnsupported,
  kCorruptFile,
  kIoError,
  kEmptyCache,
  kDegenerateScale,
  kTooFewRows,
  kFingerprintMismatch,
  kNonFiniteLoss,
  kNonPositiveVariance,
  kNonPositiveScale,
  kSingleClass,
  kMissingArtifact,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kNegativeVariance: return "NegativeVariance";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kSchemaVersionUnsupported: return "SchemaVersionUnsupported";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kEmptyCache: return "EmptyCache";
    case ErrorCode::kDegenerateScale: return "DegenerateScale";
    case ErrorCode::kTooFewRows: return "TooFewRows";
    case ErrorCode::kFingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kNonPositiveVariance: return "NonPositiveVariance";
    case ErrorCode::kNonPositiveScale: return "NonPositiveScale";
    case ErrorCode::kSingleClass: return "SingleClass";
    case ErrorCode::kMissingArtifact: return "MissingArtifact";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// Failures caused by numerics rather than bad inputs or files.
  bool is_numerical() const noexcept {
    return code_ == ErrorCode::kNotPositiveDefinite ||
           code_ == ErrorCode::kNonFiniteLoss ||
           code_ == ErrorCode::kDegenerateScale;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace gapa

// Throws gapa::Error when `cond` is false. The message expression is only
// evaluated on failure, so checks are cheap on hot paths.
#define GAPA_REQUIRE(cond, code, msg)                   \
  do {                                                  \
    if (!(cond)) ::gapa::fail((code), (msg));           \
  } while (0)
