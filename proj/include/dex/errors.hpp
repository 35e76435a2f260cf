#pragma once

#include <stdexcept>
#include <string>

namespace dex {

// Error taxonomy shared across the library. The CLI maps these to exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string &msg) : std::runtime_error(msg) {}
};

// Tensor/array dimension disagreements.
struct ShapeError : Error {
    explicit ShapeError(const std::string &msg) : Error("shape error: " + msg) {}
};

// NaN/Inf where a finite value is required.
struct NumericError : Error {
    explicit NumericError(const std::string &msg) : Error("numeric error: " + msg) {}
};

// Invalid configuration or usage.
struct ConfigError : Error {
    explicit ConfigError(const std::string &msg) : Error("config error: " + msg) {}
};

// Malformed or incompatible serialized data (checkpoints).
struct FormatError : Error {
    explicit FormatError(const std::string &msg) : Error("format error: " + msg) {}
};

// API precondition violations (e.g. backward on a non-scalar).
struct ContractError : Error {
    explicit ContractError(const std::string &msg) : Error("contract error: " + msg) {}
};

}  // namespace dex
