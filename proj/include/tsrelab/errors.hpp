// Copyright 2026 the tsrelab authors
// SPDX-License-Identifier: Apache-2.0

#ifndef TSRELAB_ERRORS_HPP
#define TSRELAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace tsrelab {

/// Base class for all tsrelab errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimensions do not agree (matmul inner dims, broadcast targets, ...).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration: bad field values, divisibility violations,
/// unknown config keys, missing files.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// NaN/Inf produced by an operation, degenerate inputs (zero-norm vectors),
/// or a failed numerical check.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// API misuse: backward on a non-scalar, conditioning mismatch, empty batch.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

}  // namespace tsrelab

#endif  // TSRELAB_ERRORS_HPP
