#pragma once

#include <stdexcept>
#include <string>

namespace recsys {

// Error taxonomy mapped onto CLI exit codes:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

// Shape / dimension mismatches between tensors and their consumers.
struct ShapeError : ConfigError {
    using ConfigError::ConfigError;
};

// Input could not be parsed; carries the 1-based line it failed on.
struct ParseError : DataError {
    ParseError(const std::string& msg, std::size_t line)
        : DataError(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
    std::size_t line_number;
};

// A vector whose norm is below the normalization threshold.
struct DegenerateVectorError : NumericError {
    using NumericError::NumericError;
};

// User has no events to encode; callers decide the cold-user fallback.
struct EmptyHistoryError : DataError {
    using DataError::DataError;
};

// Binary file failed a structural check; carries the byte offset.
struct IntegrityError : DataError {
    IntegrityError(const std::string& msg, std::uint64_t offset)
        : DataError(msg + " (offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::uint64_t byte_offset;
};

}  // namespace recsys
