#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hmoe {

class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error
{
public:
    using Error::Error;
};

// Index outside its valid range (targets, token ids).
class IndexError : public Error
{
public:
    using Error::Error;
};

// Invalid configuration or hyperparameter.
class ConfigError : public Error
{
public:
    using Error::Error;
};

// Caller broke an operation precondition.
class ContractError : public Error
{
public:
    using Error::Error;
};

// Unreadable or version-mismatched file.
class FormatError : public Error
{
public:
    using Error::Error;
};

class IoError : public Error
{
public:
    using Error::Error;
};

class DivergenceError : public Error
{
public:
    DivergenceError(std::int64_t step, const std::string& what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step)
    {
    }

    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

} // namespace hmoe
