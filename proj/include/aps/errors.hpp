#pragma once

#include <stdexcept>
#include <string>

namespace aps {

// Exception kinds map onto CLI exit codes: config -> 2, data -> 3, numeric -> 4.
struct ApsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : ApsError {
    using ApsError::ApsError;
};

struct ConfigError : ApsError {
    using ApsError::ApsError;
};

struct DataError : ApsError {
    using ApsError::ApsError;
};

struct NumericError : ApsError {
    using ApsError::ApsError;
};

struct DomainError : ApsError {
    using ApsError::ApsError;
};

struct VersionError : ApsError {
    using ApsError::ApsError;
};

}  // namespace aps
