// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deltamoe {

enum class ErrorCode {
    shape,
    numeric,
    index,
    argument,
    incompatible,
    parse,
    io,
    config,
    training_aborted,
};

inline std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::shape: return "E_SHAPE";
        case ErrorCode::numeric: return "E_NUMERIC";
        case ErrorCode::index: return "E_INDEX";
        case ErrorCode::argument: return "E_ARGUMENT";
        case ErrorCode::incompatible: return "E_INCOMPATIBLE";
        case ErrorCode::parse: return "E_PARSE";
        case ErrorCode::io: return "E_IO";
        case ErrorCode::config: return "E_CONFIG";
        case ErrorCode::training_aborted: return "E_TRAINING_ABORTED";
    }
    return "E_UNKNOWN";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(ErrorCode::shape, msg) {}
};

// Raised by any kernel whose output contains NaN or Inf; the message names the op.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorCode::numeric, msg) {}
};

struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(ErrorCode::index, msg) {}
};

struct ArgumentError : Error {
    explicit ArgumentError(const std::string& msg) : Error(ErrorCode::argument, msg) {}
};

struct IncompatibleError : Error {
    explicit IncompatibleError(const std::string& msg) : Error(ErrorCode::incompatible, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorCode::io, msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorCode::config, msg) {}
};

// Structured checkpoint/manifest rejection. `field` names the offending manifest field.
class ParseError : public Error {
public:
    ParseError(std::string field, const std::string& msg)
        : Error(ErrorCode::parse, field + ": " + msg), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class TrainingAborted : public Error {
public:
    TrainingAborted(std::size_t step, std::string last_good, const std::string& msg)
        : Error(ErrorCode::training_aborted,
                msg + " (step " + std::to_string(step) + ", last good checkpoint: " +
                    (last_good.empty() ? std::string("<none>") : last_good) + ")"),
          step_(step),
          last_good_(std::move(last_good)) {}

    std::size_t step() const noexcept { return step_; }
    const std::string& last_good() const noexcept { return last_good_; }

private:
    std::size_t step_;
    std::string last_good_;
};

}  // namespace deltamoe
