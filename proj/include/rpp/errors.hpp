// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rpp {

// Error taxonomy mirrors the CLI exit codes: config errors (2), runtime
// failures (3), internal invariant breaches (4).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

class InvariantBreach : public std::logic_error {
 public:
  explicit InvariantBreach(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace rpp
