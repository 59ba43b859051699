#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace m3tts {

// Base for every error raised by the library. The CLI maps UsageError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller misuse: non-scalar backward, missing gradients, bad selectors.
class UsageError : public Error {
public:
    using Error::Error;
};

// Extents that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside its mathematical domain (t outside [0,1], beta < 0, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Invalid hyperparameters (odd head dim, D not divisible by heads, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced by an op, or a non-finite training loss / ODE state.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad input data (out-of-vocab token, empty prompt, unreadable file).
class DataError : public Error {
public:
    using Error::Error;
};

// Malformed binary or text file.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Checkpoint was written for a different model configuration.
class ConfigMismatchError : public Error {
public:
    using Error::Error;
};

} // namespace m3tts
