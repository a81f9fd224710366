#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pykv {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kNonFinite,
  kOrdering,
  kOutOfRange,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kDimensionOverflow,
  kTrailingData,
  kIo,
  kConfig,
  kEmptyPartition,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kOrdering: return "ordering";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kDimensionOverflow: return "dimension_overflow";
    case ErrorCode::kTrailingData: return "trailing_data";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kEmptyPartition: return "empty_partition";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace detail

}  // namespace pykv
