#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pmerge {

enum class ErrorKind {
  Dimension,
  Numeric,
  Index,
  Contract,
  Length,
  MaskViolation,
  Design,
  Config,
  Load,
  Oracle,
  Compatibility,
  EmptyData,
  Io,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library. The kind is machine-readable and
/// the CLI reports it verbatim in its error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace pmerge
