#pragma once

#include <stdexcept>
#include <string>

namespace qsm {

// Error classes map one-to-one onto the C API status codes and, through
// them, onto the CLI exit codes.
enum class ErrorCode {
    InvalidInput = 1,
    DimensionMismatch,
    NumericalConsistency,
    DegenerateDistribution,
    TrainingDiverged,
    PlacementFailed,
    Io,
    BadMagic,
    Truncated,
    UnsupportedVersion,
    ShapeMismatch,
    MissingEntry,
    Config,
};

const char *error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &msg) { throw Error(code, msg); }

} // namespace qsm
