#pragma once

#include <stdexcept>
#include <string>

namespace ssm2mel {

// Error categories. Values match the CLI exit-code contract and the
// status codes in include/ssm2mel.h.
enum class ErrKind : int {
  Selftest = 1,  // embedded verification suite failure
  Config = 2,    // usage / config / spec parse errors
  Io = 3,        // filesystem and format errors
  Numeric = 4,   // non-finite values, aborted training
  Shape = 5,     // dimension or data mismatches
};

struct Error : std::runtime_error {
  ErrKind kind;
  Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

}  // namespace ssm2mel
