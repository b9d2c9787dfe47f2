#pragma once
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlmm {

// Unknown state / person / board lookups.
struct lookup_error : std::out_of_range
{
    using std::out_of_range::out_of_range;
};

// Caller violated an operation's precondition (illegal move, bad dimension, ...).
struct precondition_error : std::invalid_argument
{
    using std::invalid_argument::invalid_argument;
};

// A configured size guard was exceeded.
struct capacity_error : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

struct convergence_error : std::runtime_error
{
    double residual;
    convergence_error(const std::string& what, double residual_)
        : std::runtime_error(what), residual(residual_) {}
};

// Non-finite values produced inside an optimizer stage.
struct numeric_error : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

// Several highest-advantage actions where a unique one is required.
struct tie_error : std::domain_error
{
    using std::domain_error::domain_error;
};

struct undefined_correlation : std::domain_error
{
    using std::domain_error::domain_error;
};

struct schema_error : std::runtime_error
{
    std::vector<std::size_t> lines;
    schema_error(const std::string& what, std::vector<std::size_t> lines_ = {})
        : std::runtime_error(what), lines(std::move(lines_)) {}
};

} // namespace rlmm
