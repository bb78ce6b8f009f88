// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace sonolearn {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A time or index falls outside the data it addresses.
struct RangeError : Error {
    using Error::Error;
};

/// Not enough data to satisfy a sampling request.
struct InsufficientDataError : Error {
    using Error::Error;
};

/// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

/// Tensor/matrix shape mismatch.
struct ShapeError : Error {
    using Error::Error;
};

/// Lookup of an index or key that does not exist.
struct LookupError : Error {
    using Error::Error;
};

/// Operation received an empty input it cannot act on.
struct EmptyInputError : Error {
    using Error::Error;
};

/// Input is degenerate for the requested computation (e.g. all-zero map).
struct DegenerateInputError : Error {
    using Error::Error;
};

/// Filesystem or serialization failure; message carries the path.
struct IoError : Error {
    using Error::Error;
};

}  // namespace sonolearn
