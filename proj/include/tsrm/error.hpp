#pragma once

#include <stdexcept>
#include <string>

namespace tsrm {

enum class ErrorKind {
  Config,              // invalid hyperparameters or shapes
  Data,                // malformed or insufficient input data
  Io,                  // file missing or unwritable
  CorruptCheckpoint,   // truncated or unparseable checkpoint content
  ShapeMismatch,       // checkpoint manifest disagrees with the configured model
  UnsupportedVersion,  // unknown checkpoint format version
  Numerical,           // NaN / Inf during training
  Internal,
};

const char* to_string(ErrorKind kind) noexcept;

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

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace tsrm
