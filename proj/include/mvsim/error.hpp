#pragma once

#include <stdexcept>
#include <string>

namespace mvsim {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

/// A coefficient or state produced a NaN or infinity.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Requested configuration is outside what an algorithm supports.
class UnsupportedError : public Error {
public:
    using Error::Error;
};

/// A numerical estimate failed its own consistency guard (non-stationarity,
/// truncation not converged, noise-dominated differences, ...).
class EstimationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mvsim
