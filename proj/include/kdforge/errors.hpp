// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kdforge {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input that fails validation (bad config, out-of-range token, bad flag).
// The CLI maps this family to exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

struct AxisError : ValidationError {
    using ValidationError::ValidationError;
};

struct RangeError : ValidationError {
    using ValidationError::ValidationError;
};

struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

// Misuse of the autodiff graph: non-scalar loss, nothing to differentiate,
// or a second backward over an already consumed graph.
struct GraphError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct BadMagicError : FormatError {
    using FormatError::FormatError;
};

struct UnsupportedVersionError : FormatError {
    using FormatError::FormatError;
};

struct TruncatedError : FormatError {
    using FormatError::FormatError;
};

}  // namespace kdforge
