// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dialogbert {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or ranks.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value violates an operation's precondition.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration, corpus, vocabulary or checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dialogbert
