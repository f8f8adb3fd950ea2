#pragma once

#include <stdexcept>
#include <string>

namespace radmae {

enum class ErrorCode {
  kInvalidArgument = 1,
  kIo = 2,
  kParse = 3,
  kNumeric = 4,
  kNotFound = 5,
  kInternal = 6,
};

/// Exception carrying a coarse category so the C API can map it onto a status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); }
[[noreturn]] inline void fail_io(const std::string& what) { throw Error(ErrorCode::kIo, what); }
[[noreturn]] inline void fail_parse(const std::string& what) { throw Error(ErrorCode::kParse, what); }

// Sink for non-fatal diagnostics. Defaults to stderr; tests may replace it.
using WarningSink = void (*)(const std::string&);
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace radmae
