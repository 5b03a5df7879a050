#pragma once

#include <stdexcept>
#include <string>

namespace qcate {

// Error categories map 1:1 onto CLI exit codes: config=2, data=3, numeric=4.
enum class ErrorCategory { config, data, numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, std::string msg)
        : std::runtime_error(std::move(msg)), cat_(cat) {}
    ErrorCategory category() const noexcept { return cat_; }

private:
    ErrorCategory cat_;
};

struct ConfigError : Error {
    explicit ConfigError(std::string m) : Error(ErrorCategory::config, std::move(m)) {}
};

// Schema/column problems in input descriptions.
struct SchemaError : Error {
    explicit SchemaError(std::string m) : Error(ErrorCategory::config, std::move(m)) {}
};

// Caller passed values violating a documented precondition.
struct ArgumentError : Error {
    explicit ArgumentError(std::string m) : Error(ErrorCategory::config, std::move(m)) {}
};

// Malformed or inconsistent input data.
struct DataError : Error {
    explicit DataError(std::string m) : Error(ErrorCategory::data, std::move(m)) {}
};

// Row-count or row-id mismatch between two aligned inputs.
struct AlignmentError : Error {
    explicit AlignmentError(std::string m) : Error(ErrorCategory::data, std::move(m)) {}
};

// Model fitting failed (single-class input, empty arm, tiny sample, ...).
struct FitError : Error {
    explicit FitError(std::string m) : Error(ErrorCategory::numeric, std::move(m)) {}
};

// Root-finding / target calibration could not be satisfied.
struct CalibrationError : Error {
    explicit CalibrationError(std::string m) : Error(ErrorCategory::numeric, std::move(m)) {}
};

// Design matrix degenerate for the requested estimator.
struct DegenerateDesignError : Error {
    explicit DegenerateDesignError(std::string m) : Error(ErrorCategory::numeric, std::move(m)) {}
};

struct NumericError : Error {
    explicit NumericError(std::string m) : Error(ErrorCategory::numeric, std::move(m)) {}
};

inline int exit_code(ErrorCategory cat) {
    switch (cat) {
        case ErrorCategory::config: return 2;
        case ErrorCategory::data: return 3;
        case ErrorCategory::numeric: return 4;
    }
    return 1;
}

}  // namespace qcate
