#pragma once

#include <stdexcept>
#include <string>

namespace kmfpe {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid value for the mathematical domain (non-positive price, sigma <= 0, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller broke an operation precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Malformed configuration or input file.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Not enough samples / pairs / points for the requested estimate.
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Least-squares or extrapolation failure (rank deficiency, no convergence).
class FitError : public Error {
public:
    using Error::Error;
};

/// Solver or simulator blew up (NaN, stability, positivity).
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace kmfpe
