#pragma once

#include <stdexcept>
#include <string>

namespace tc {

/// A core tensor (or subchain) is identically zero where a nonzero one is required.
class degenerate_model_error : public std::runtime_error {
public:
    explicit degenerate_model_error(const std::string& what) : std::runtime_error(what) {}
};

/// The closed-form rotation scaling s_r is undefined for component `component`.
class degenerate_rotation_error : public std::runtime_error {
public:
    degenerate_rotation_error(const std::string& what, int component)
        : std::runtime_error(what), component_(component) {}
    int component() const noexcept { return component_; }

private:
    int component_;
};

/// The residual-ball constraint cannot be met: the least-squares floor exceeds delta^2.
class infeasible_bound_error : public std::runtime_error {
public:
    infeasible_bound_error(const std::string& what, double least_squares_residual_sq)
        : std::runtime_error(what), ls_residual_sq_(least_squares_residual_sq) {}
    double least_squares_residual_sq() const noexcept { return ls_residual_sq_; }

private:
    double ls_residual_sq_;
};

/// Operation defined only for a specific tensor order (e.g. order-3 BTD conversion).
class unsupported_order_error : public std::invalid_argument {
public:
    explicit unsupported_order_error(const std::string& what) : std::invalid_argument(what) {}
};

/// A randomized generator could not satisfy its constraints within the retry budget.
class generation_failure : public std::runtime_error {
public:
    explicit generation_failure(const std::string& what) : std::runtime_error(what) {}
};

} // namespace tc
