#pragma once

#include <stdexcept>
#include <string>

namespace declip {

// File/format problems (missing files, bad magic, checksum, malformed text).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failures (non-finite values, gradient-check failure, divergence).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace declip
