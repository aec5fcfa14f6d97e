#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace catnet {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration value violates a structural constraint (divisibility, counts, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input data is out of its domain (label values, patient files, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// API or CLI misuse.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

} // namespace catnet
