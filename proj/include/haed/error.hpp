#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace haed {

/// Exception carrying a stable, machine-parseable error code
/// (e.g. "EmptyCorpus", "UnknownKey") next to a human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& message) {
  throw Error(std::move(code), message);
}

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace haed
