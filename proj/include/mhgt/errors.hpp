#pragma once

#include <stdexcept>
#include <string>

namespace mhgt {

// Error taxonomy mapped to CLI exit codes: validation/config/shape -> 1,
// numeric -> 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed inputs: bad graph references, schema violations, contract breaks.
struct ValidationError : Error {
    using Error::Error;
};

// Bad configuration values (files, flags, invariant-violating settings).
struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

// Tensor dimension mismatches.
struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};

// Non-finite values where finiteness is part of the contract.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace mhgt
