#pragma once

#include <stdexcept>
#include <string>

namespace mpmnet {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/arity mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Argument outside the mathematical domain of the op (log of <= 0, ...).
struct DomainError : Error {
    using Error::Error;
};

// NaN/Inf or a numerically impossible intermediate (negative quadratic form).
struct NumericError : Error {
    using Error::Error;
};

// Bad user configuration (unknown dataset, negative epsilon, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed external file (IDX magic, truncated payload, checkpoint manifest).
struct FormatError : Error {
    using Error::Error;
};

// Dataset/task construction problems (missing class, too few samples).
struct TaskError : Error {
    using Error::Error;
};

// Operation invoked in a state that does not support it (missing frozen solution).
struct StateError : Error {
    using Error::Error;
};

// Evaluation protocol violations (empty jointly-correct set, mismatched reports).
struct EvalError : Error {
    using Error::Error;
};

}  // namespace mpmnet
