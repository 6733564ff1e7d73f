#pragma once

#include <stdexcept>
#include <string>

namespace qve {

enum class ErrorKind {
  input,             // malformed arguments, out-of-range ids or indices
  numeric,           // non-finite values, divergence, singular systems
  version_mismatch,  // weight file magic or version not recognised
  truncated,         // weight file shorter than its manifest requires
  shape_mismatch,    // manifest shapes disagree with the configuration
  io,                // unreadable or unwritable paths
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::input, what);
}

}  // namespace qve
