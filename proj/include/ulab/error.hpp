#ifndef ULAB_ERROR_HPP
#define ULAB_ERROR_HPP

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace ulab {

enum class ErrorCode {
    InvalidArgument,
    BadMagic,
    CountMismatch,
    Truncated,
    Parse,
    MembershipViolation,
    Divergence,
    NumericalFailure,
    NoVoters,
    UndefinedSimilarity,
    Covariance,
    InvalidReplacement,
    Io,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::BadMagic: return "bad-magic";
    case ErrorCode::CountMismatch: return "count-mismatch";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::Parse: return "parse-error";
    case ErrorCode::MembershipViolation: return "membership-violation";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::NumericalFailure: return "numerical-failure";
    case ErrorCode::NoVoters: return "no-voters";
    case ErrorCode::UndefinedSimilarity: return "undefined-similarity";
    case ErrorCode::Covariance: return "covariance";
    case ErrorCode::InvalidReplacement: return "invalid-replacement";
    case ErrorCode::Io: return "io";
    }
    return "unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
/// Some codes attach a position: the offending sample id for membership
/// violations, the step or iteration index for divergence, the parameter
/// index for numerical failures, the row number for CSV parse errors.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, std::optional<std::uint64_t> where = std::nullopt)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), where_(where) {}

    ErrorCode code() const noexcept { return code_; }
    std::optional<std::uint64_t> where() const noexcept { return where_; }

private:
    ErrorCode code_;
    std::optional<std::uint64_t> where_;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(ErrorCode::InvalidArgument, message);
    }
}

} // namespace ulab

#endif
