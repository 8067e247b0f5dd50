#pragma once
#include <stdexcept>
#include <string>

namespace dms {

// All recoverable failures (bad shapes, bad configs, domain violations)
// surface as dms::Error. The CLI maps them to exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

}  // namespace dms
