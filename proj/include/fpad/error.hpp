#pragma once

#include <stdexcept>
#include <string>

namespace fpad {

// Programming errors: dimension mismatches, labels out of range,
// preconditions broken by the caller.
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

// Bad or inconsistent configuration supplied by the user.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Bad magic or unparseable container header.
struct HeaderError : IoError {
    using IoError::IoError;
};
// Truncated or inconsistent payload blocks.
struct PayloadError : IoError {
    using IoError::IoError;
};
// CRC over the payload does not match the stored value.
struct ChecksumError : IoError {
    using IoError::IoError;
};

// Corpus generation could not place the requested segments.
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Episode sampling exhausted its retry budget.
struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Controlled split infeasible for the given catalog.
struct SplitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value in a training step.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fpad
