#ifndef CORRDISTILL_ERROR_HPP
#define CORRDISTILL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace corrdistill {

// Base of every error thrown by the library. The CLI maps these to exit
// status 1; UsageError maps to 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Broken precondition that is not a pure shape problem (asymmetric input,
// missing partner sets, out-of-range labels, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class RankError : public NumericError {
public:
    using NumericError::NumericError;
};

class SizeError : public Error {
public:
    using Error::Error;
};

class DegenerateError : public Error {
public:
    using Error::Error;
};

class EmptyEvaluationError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

enum class FormatErrorKind {
    io,
    bad_magic,
    version_mismatch,
    truncated,
    non_finite,
    invalid_header,
    parse,
};

inline const char* to_string(FormatErrorKind kind) {
    switch (kind) {
    case FormatErrorKind::io: return "io";
    case FormatErrorKind::bad_magic: return "bad magic";
    case FormatErrorKind::version_mismatch: return "version mismatch";
    case FormatErrorKind::truncated: return "truncated";
    case FormatErrorKind::non_finite: return "non-finite value";
    case FormatErrorKind::invalid_header: return "invalid header";
    case FormatErrorKind::parse: return "parse";
    }
    return "unknown";
}

class FormatError : public Error {
public:
    FormatError(FormatErrorKind kind, const std::string& what)
        : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

}  // namespace corrdistill

#endif  // CORRDISTILL_ERROR_HPP
