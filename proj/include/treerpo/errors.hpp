// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace treerpo {

/// Invalid user-supplied configuration (bad knob values, unparsable config).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

/// A configured resource bound (e.g. the per-tree node cap) would be exceeded.
struct ResourceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Lookup of an id that does not exist.
struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Malformed serialized input; carries the 1-based line number.
struct ParseError : std::runtime_error {
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace treerpo
