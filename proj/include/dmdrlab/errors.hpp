#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dmdrlab {

// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A numeric function was evaluated outside its domain (log of a
// non-positive value, exp overflow, t outside [0, 1], ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// A caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid construction parameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Non-finite values appeared during a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Training diverged; carries the iteration at which it happened.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long iteration)
        : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}

    long iteration() const noexcept { return iteration_; }

private:
    long iteration_;
};

// Config text could not be parsed; line numbers are 1-based.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// A checkpoint file is malformed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t byte_position)
        : Error(what + " (byte " + std::to_string(byte_position) + ")"), position_(byte_position) {}

    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

}  // namespace dmdrlab
