#pragma once

#include <stdexcept>
#include <string>

namespace nemo {

// Precondition on scalar arguments violated (bad schedule bounds, t out of range, ...).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Model or record file cannot be decoded.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

// Exhaustive search would exceed its documented size bound.
class BudgetError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonConvergenceError : public std::runtime_error {
public:
    NonConvergenceError(const std::string& what, double final_loss)
        : std::runtime_error(what), final_loss_(final_loss) {}
    double final_loss() const { return final_loss_; }

private:
    double final_loss_;
};

}  // namespace nemo
