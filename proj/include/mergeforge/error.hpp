// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace mergeforge {

// Base for every error the library throws. The category decides the CLI exit
// code: validation problems are 1, usage problems 2, I/O and endpoint
// failures 3.
class Error : public std::runtime_error {
public:
    enum class Kind { validation, usage, io };

    Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// Malformed checkpoint file. Carries the offending tensor (may be empty) and
// the absolute byte position in the file where parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::string tensor, std::uint64_t position)
        : Error(Kind::validation,
                what + (tensor.empty() ? "" : " (tensor '" + tensor + "')") + " at byte " +
                    std::to_string(position)),
          tensor_(std::move(tensor)),
          position_(position) {}

    const std::string& tensor() const noexcept { return tensor_; }
    std::uint64_t position() const noexcept { return position_; }

private:
    std::string tensor_;
    std::uint64_t position_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(Kind::validation, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(Kind::usage, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(Kind::io, what) {}
};

}  // namespace mergeforge
