#pragma once

#include <stdexcept>
#include <string>

namespace emgait {

enum class ErrorCode {
  usage,
  config,
  missing_file,
  schema,
  split_overlap,
  io,
  empty_input,
  degenerate,
  backend_unavailable,
  divergence,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::usage: return "usage";
    case ErrorCode::config: return "config";
    case ErrorCode::missing_file: return "missing_file";
    case ErrorCode::schema: return "schema";
    case ErrorCode::split_overlap: return "split_overlap";
    case ErrorCode::io: return "io";
    case ErrorCode::empty_input: return "empty_input";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::backend_unavailable: return "backend_unavailable";
    case ErrorCode::divergence: return "divergence";
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

}  // namespace emgait
