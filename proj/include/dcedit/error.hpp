#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dcedit {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  unknown_attribute,
  non_finite,
  io,
  not_found,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::unknown_attribute: return "unknown_attribute";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::io: return "io_error";
    case ErrorCode::not_found: return "not_found";
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

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace dcedit
