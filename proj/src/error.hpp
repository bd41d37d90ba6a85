#pragma once

#include <stdexcept>
#include <string>

namespace basinmerge {

enum class ErrorCode {
  format,
  size,
  validation,
  io,
  domain,
  shape,
  compatibility,
  divergence,
  undefined_metric,
  internal,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised when the container bytes do not follow the TMC1 layout.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : Error(ErrorCode::format,
              what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace basinmerge
