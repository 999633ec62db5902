#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "treeqn/tensor.hpp"

namespace treeqn {

// Non-centered RMSProp; epsilon is added outside the square root:
//   v <- alpha * v + (1 - alpha) * g^2
//   theta <- theta - lr * g / (sqrt(v) + eps)
class RmsProp {
public:
    RmsProp(std::span<Variable* const> params, double lr, double alpha, double eps)
        : params_(params.begin(), params.end()), lr_(lr), alpha_(alpha), eps_(eps) {
        for (const Variable* p : params_)
            second_moment_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
    }

    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Variable& p = *params_[k];
            std::vector<double>& v = second_moment_[k];
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double g = p.grad[i];
                v[i] = alpha_ * v[i] + (1.0 - alpha_) * g * g;
                p.value[i] -= lr_ * g / (std::sqrt(v[i]) + eps_);
            }
        }
        ++step_count_;
    }

    std::int64_t step_count() const { return step_count_; }
    void set_step_count(std::int64_t c) { step_count_ = c; }

    std::span<const double> moment(std::size_t k) const { return second_moment_[k]; }
    void set_moment(std::size_t k, std::span<const double> v) {
        if (v.size() != second_moment_[k].size())
            throw std::invalid_argument("RmsProp::set_moment: size mismatch");
        second_moment_[k].assign(v.begin(), v.end());
    }
    std::size_t num_params() const { return params_.size(); }
    const Variable& param(std::size_t k) const { return *params_[k]; }

private:
    std::vector<Variable*> params_;
    std::vector<std::vector<double>> second_moment_;
    double lr_, alpha_, eps_;
    std::int64_t step_count_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
inline double clip_global_grad_norm(std::span<Variable* const> params, double max_norm) {
    double sq = 0.0;
    for (const Variable* p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Variable* p : params)
            for (double& g : p->grad) g *= scale;
    }
    return norm;
}

}  // namespace treeqn
