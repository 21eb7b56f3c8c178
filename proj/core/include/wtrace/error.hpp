#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace wtrace {

/// Base of every error thrown by the library. `kind()` is a stable short tag
/// that the CLI prints and tests match against.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define WTRACE_DEFINE_ERROR(Name, tag)                                     \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(tag, what) {}           \
  }

WTRACE_DEFINE_ERROR(DimensionError, "dimension");
WTRACE_DEFINE_ERROR(ConfigError, "config");
WTRACE_DEFINE_ERROR(IndexError, "index");
WTRACE_DEFINE_ERROR(EmptyBatchError, "empty-batch");
WTRACE_DEFINE_ERROR(FormatError, "format");
WTRACE_DEFINE_ERROR(IoError, "io");
WTRACE_DEFINE_ERROR(InvariantError, "invariant");
WTRACE_DEFINE_ERROR(IntegrityError, "integrity");
WTRACE_DEFINE_ERROR(OrderingError, "ordering");
WTRACE_DEFINE_ERROR(VersionError, "version");
WTRACE_DEFINE_ERROR(CorruptIndexError, "corrupt-index");
WTRACE_DEFINE_ERROR(EmptyEstimateError, "empty-estimate");
WTRACE_DEFINE_ERROR(UnsupportedRenderError, "unsupported-render");

#undef WTRACE_DEFINE_ERROR

/// The model's architecture hash differs from the one a ledger was written for.
class ArchMismatchError : public IntegrityError {
 public:
  explicit ArchMismatchError(const std::string& what) : IntegrityError(what) {}
};

/// Raised when a gradient contains NaN/Inf; training aborts at `step`.
class NumericError : public Error {
 public:
  NumericError(std::uint64_t step, const std::string& what)
      : Error("numeric", what), step_(step) {}
  std::uint64_t step() const noexcept { return step_; }

 private:
  std::uint64_t step_;
};

/// A record failed its CRC. `last_good_step` is the last step that verified
/// on the same stream, or -1 if none did.
class ChecksumError : public Error {
 public:
  ChecksumError(std::int64_t last_good_step, const std::string& what)
      : Error("checksum", what), last_good_step_(last_good_step) {}
  std::int64_t last_good_step() const noexcept { return last_good_step_; }

 private:
  std::int64_t last_good_step_;
};

}  // namespace wtrace
