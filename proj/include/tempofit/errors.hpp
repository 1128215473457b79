#pragma once

#include <stdexcept>
#include <string>

namespace tempofit {

// Incompatible tensor shapes or dims.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value (capacity < 1, odd head_dim, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Timestep monotonicity violation on a memory stream.
struct OrderingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A softmax row with every logit masked to -inf.
struct MaskingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File read/write failure, carries the path in the message.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace tempofit
