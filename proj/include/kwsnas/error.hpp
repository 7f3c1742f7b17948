/* Copyright 2026 The kwsnas Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef KWSNAS_ERROR_HPP_
#define KWSNAS_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace kwsnas {

/// Invalid configuration (bad JSON, unknown keys, inconsistent settings).
/// The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible tensor/layer shapes detected at construction or dispatch.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value produced by a forward or backward pass.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse (stale cache, double quantizer attachment, ...).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

/// File or directory level failure (missing WAV, bad container, ...).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace kwsnas

#endif  // KWSNAS_ERROR_HPP_
