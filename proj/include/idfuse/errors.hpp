#pragma once

#include <stdexcept>
#include <string>

namespace idfuse {

/// Root of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions are incompatible.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An argument is outside its documented domain (ranges, empty inputs, ordering).
class InputError : public Error {
public:
    using Error::Error;
};

/// An operation was called in the wrong state, e.g. backward without a forward cache.
class StateError : public Error {
public:
    using Error::Error;
};

/// Statistics or reductions are undefined for the input (empty softmax, zero variance, zero norm).
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
public:
    NumericError(const std::string& what, long step, std::string group)
        : Error(what), step_(step), group_(std::move(group)) {}
    long step() const { return step_; }
    const std::string& group() const { return group_; }

private:
    long step_;
    std::string group_;
};

/// Synthetic data generation could not satisfy its separation constraint.
class GenerationError : public Error {
public:
    using Error::Error;
};

}  // namespace idfuse
