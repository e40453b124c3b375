#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sada {

enum class ErrorKind {
    MissingFile,
    ManifestSchemaError,
    ShapeMismatch,
    NonFiniteValue,
    IoError,
    KTooLarge,
    KTooSmall,
    TooFewSamples,
    SingularConditioningBlock,
    NotComputed,
    NegativeConditionalVariance,
    DimMismatch,
    StepsTooSmall,
    InvalidSpec,
    ZeroVector,
    DegenerateShift,
    NonPositiveVariance,
    InvalidTarget,
    InvalidConfig,
    BadConfig,
    TooFewSeeds,
    RankDeficientEncoder,
    TooFewPairs,
};

inline constexpr std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::ManifestSchemaError: return "ManifestSchemaError";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteValue: return "NonFiniteValue";
        case ErrorKind::IoError: return "IoError";
        case ErrorKind::KTooLarge: return "KTooLarge";
        case ErrorKind::KTooSmall: return "KTooSmall";
        case ErrorKind::TooFewSamples: return "TooFewSamples";
        case ErrorKind::SingularConditioningBlock: return "SingularConditioningBlock";
        case ErrorKind::NotComputed: return "NotComputed";
        case ErrorKind::NegativeConditionalVariance: return "NegativeConditionalVariance";
        case ErrorKind::DimMismatch: return "DimMismatch";
        case ErrorKind::StepsTooSmall: return "StepsTooSmall";
        case ErrorKind::InvalidSpec: return "InvalidSpec";
        case ErrorKind::ZeroVector: return "ZeroVector";
        case ErrorKind::DegenerateShift: return "DegenerateShift";
        case ErrorKind::NonPositiveVariance: return "NonPositiveVariance";
        case ErrorKind::InvalidTarget: return "InvalidTarget";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::BadConfig: return "BadConfig";
        case ErrorKind::TooFewSeeds: return "TooFewSeeds";
        case ErrorKind::RankDeficientEncoder: return "RankDeficientEncoder";
        case ErrorKind::TooFewPairs: return "TooFewPairs";
    }
    return "Unknown";
}

/// Every failure in the library is reported as a sada::Error carrying a
/// machine-checkable kind. The message always starts with the kind name.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& detail) {
    throw Error(kind, detail);
}

inline void require(bool condition, ErrorKind kind, const std::string& detail) {
    if (!condition) fail(kind, detail);
}

}  // namespace sada
