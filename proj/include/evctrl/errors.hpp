// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evctrl {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor/grid shapes that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid model, run, or policy configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A numeric parameter out of its documented range.
class ParameterError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Cache consulted before it was populated, or a schedule that would do so.
class SchedulingError : public Error {
public:
    using Error::Error;
};

/// A full refresh that does not cover every (branch, layer).
class IntegrityError : public Error {
public:
    using Error::Error;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Cosine similarity against an all-zero vector.
class UndefinedSimilarityError : public Error {
public:
    using Error::Error;
};

/// A non-finite value escaped a kernel.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed input file; carries the 1-based line where parsing failed.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

} // namespace evctrl
