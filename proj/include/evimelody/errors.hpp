// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evimelody {

/// Invalid configuration value or incompatible settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system failures: missing, unreadable or unwritable paths.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values, divergence, degenerate numeric input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structurally invalid data (audio headers, label ordering, manifests).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A text file row that failed to parse. Line numbers are 1-based.
class ParseError : public FormatError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : FormatError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Operation invoked in the wrong object state (e.g. reusing a consumed graph).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using RangeError = std::out_of_range;
using DomainError = std::domain_error;
using ArgumentError = std::invalid_argument;

}  // namespace evimelody
