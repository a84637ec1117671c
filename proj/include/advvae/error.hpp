#pragma once

#include <stdexcept>
#include <string>

namespace advvae {

// Exception taxonomy. The CLI maps each family onto a distinct exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes or widths that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Input outside an operation's mathematical domain (log of a non-positive value, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed or degenerate input data.
class DataError : public Error {
public:
    using Error::Error;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t line)
        : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// Non-finite loss during training.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace advvae
