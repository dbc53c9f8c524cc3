#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace deviant {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map failures onto exit codes by category.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced or consumed where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

// Not enough images in a pool to build the requested episode or manifest.
class CapacityError : public Error {
public:
    using Error::Error;
};

// Attention mask has no anomalous patch.
class MaskError : public Error {
public:
    using Error::Error;
};

// Malformed or truncated binary/text file.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    explicit FormatError(const std::string& what) : Error(what) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_ = 0;
};

// Data that parses but breaks a domain invariant (e.g. a normal image with a
// non-empty anomaly mask).
class InvariantError : public Error {
public:
    using Error::Error;
};

// Bad configuration value or unknown key.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace deviant
