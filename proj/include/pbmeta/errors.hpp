#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace pbmeta {

enum class ErrorCode {
    NonBinaryTreatment,
    MissingCovariate,
    EmptyStudy,
    NonPositiveVariance,
    DuplicateStudyId,
    DimensionMismatch,
    IndexOutOfRange,
    EmptyWithinSet,
    Infeasible,
    MaxIterations,
    TooLarge,
    RankDeficient,
    MissingOutcome,
    NonConvergence,
    MissingNStar,
    DegenerateRegression,
    ZeroWeights,
    NotApplicable,
    RootFindFailure,
    CalibrationMissing,
    TooManyFailures,
    ParseError,
    NotLoaded,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
    case ErrorCode::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorCode::MissingCovariate: return "MissingCovariate";
    case ErrorCode::EmptyStudy: return "EmptyStudy";
    case ErrorCode::NonPositiveVariance: return "NonPositiveVariance";
    case ErrorCode::DuplicateStudyId: return "DuplicateStudyId";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::EmptyWithinSet: return "EmptyWithinSet";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::MaxIterations: return "MaxIterations";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::MissingOutcome: return "MissingOutcome";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::MissingNStar: return "MissingNStar";
    case ErrorCode::DegenerateRegression: return "DegenerateRegression";
    case ErrorCode::ZeroWeights: return "ZeroWeights";
    case ErrorCode::NotApplicable: return "NotApplicable";
    case ErrorCode::RootFindFailure: return "RootFindFailure";
    case ErrorCode::CalibrationMissing: return "CalibrationMissing";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NotLoaded: return "NotLoaded";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code), message_(msg) {}
    ErrorCode code() const noexcept { return code_; }
    const std::string& message() const noexcept { return message_; }

private:
    ErrorCode code_;
    std::string message_;
};

// Farkas-type evidence that no weight vector meets the constraints.
// `direction` is a dual ray over the balance rows; `violated` lists rows whose
// closest achievable value still misses its band.
struct InfeasibilityCertificate {
    std::vector<double> direction;
    std::vector<double> closest;
    std::vector<double> target;
    std::vector<double> tolerance;
    std::vector<int> violated;
    std::vector<std::string> names;
    double residual = 0.0;
    std::string group;
};

class InfeasibleError : public Error {
public:
    InfeasibleError(const std::string& msg, InfeasibilityCertificate cert)
        : Error(ErrorCode::Infeasible, msg), cert_(std::move(cert)) {}
    const InfeasibilityCertificate& certificate() const noexcept { return cert_; }
    InfeasibilityCertificate& certificate() noexcept { return cert_; }

private:
    InfeasibilityCertificate cert_;
};

[[noreturn]] inline void fail(ErrorCode c, const std::string& msg) { throw Error(c, msg); }

} // namespace pbmeta
