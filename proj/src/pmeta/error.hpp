#pragma once

#include <stdexcept>
#include <string>

namespace pmeta {

enum class ErrorKind {
  invalid_argument,
  shape,
  numeric,
  state,
  parse,
  io,
  unsupported,
};

// All engine failures surface as this exception; the C API maps `kind` onto
// its status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace pmeta
