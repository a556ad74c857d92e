#pragma once

#include <stdexcept>
#include <string>

namespace dualmil {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Input outside the mathematical domain of an operation (e.g. log of a nonpositive value).
class DomainError : public Error {
public:
    using Error::Error;
};

/// A NaN or Inf appeared in a value or gradient buffer.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API contract (non-scalar loss, cache miss, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated on-disk data.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Structurally valid data that violates a dataset invariant.
class DataError : public Error {
public:
    using Error::Error;
};

/// Bad configuration key, value or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A metric is undefined for the given input (e.g. AUC with one class).
class MetricUndefinedError : public Error {
public:
    using Error::Error;
};

}  // namespace dualmil
