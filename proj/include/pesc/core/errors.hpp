// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pesc {

enum class ErrorKind {
    config,
    shape,
    index,
    contract,
    numeric,
    divergence,
    identity,
    data,
    io,
};

/// Base class for every error raised by the library. The kind decides the
/// process exit code used by the command-line tool.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string &message) : std::runtime_error(message), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string &message) : Error(ErrorKind::config, message) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string &message) : Error(ErrorKind::shape, message) {}
};

class IndexError : public Error {
public:
    explicit IndexError(const std::string &message) : Error(ErrorKind::index, message) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string &message) : Error(ErrorKind::contract, message) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string &message) : Error(ErrorKind::numeric, message) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string &message) : Error(ErrorKind::data, message) {}
};

class IoError : public Error {
public:
    IoError(const std::string &path, const std::string &what)
        : Error(ErrorKind::io, path + ": " + what), path_(path) {}

    [[nodiscard]] const std::string &path() const noexcept { return path_; }

private:
    std::string path_;
};

class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, const std::string &what)
        : Error(ErrorKind::divergence, "diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

    [[nodiscard]] std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

class IdentityViolation : public Error {
public:
    IdentityViolation(std::uint64_t seed, double deviation, double tolerance)
        : Error(ErrorKind::identity, "identity violated: deviation " + std::to_string(deviation) +
                                         " >= tolerance " + std::to_string(tolerance) + " (trial seed " +
                                         std::to_string(seed) + ")"),
          seed_(seed), deviation_(deviation) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] double deviation() const noexcept { return deviation_; }

private:
    std::uint64_t seed_;
    double deviation_;
};

/// Exit codes: 0 success, 1 validation error, 2 numeric/divergence failure, 3 I/O failure.
[[nodiscard]] constexpr int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::numeric:
    case ErrorKind::divergence:
    case ErrorKind::identity:
        return 2;
    case ErrorKind::io:
        return 3;
    default:
        return 1;
    }
}

} // namespace pesc
