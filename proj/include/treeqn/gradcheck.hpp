#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>

#include "treeqn/rng.hpp"
#include "treeqn/tensor.hpp"

namespace treeqn {

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

struct GradCheckOptions {
    double step = 1e-5;
    int max_coords_per_var = 0;  // 0 checks every coordinate
    // Coordinates where both sides are this small count as agreeing: central
    // differences cannot resolve a true zero below their cancellation noise
    // (~eps * |f| / step), e.g. shift-invariant directions of a softmax.
    double zero_tol = 1e-7;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    std::string worst_var;
    int worst_coord = -1;
};

// Central-difference oracle: (f(x+h) - f(x-h)) / 2h per coordinate, compared
// against the reverse-mode gradients of a single backward pass. The forward
// callable must be a pure function of the variables it reads through
// Tape::param. Independent of the backward implementation by construction:
// only forward evaluations are used on the difference side.
inline GradCheckReport finite_diff_check(const std::function<Tensor(Tape&)>& forward,
                                         std::span<Variable* const> vars,
                                         const GradCheckOptions& opts = {},
                                         Rng* coord_rng = nullptr) {
    Tape tape;
    Tensor loss = forward(tape);
    tape.backward(loss);

    GradCheckReport report;
    const double h = opts.step;
    for (Variable* var : vars) {
        const int n = var->numel();
        std::vector<int> coords(static_cast<std::size_t>(n));
        std::iota(coords.begin(), coords.end(), 0);
        if (opts.max_coords_per_var > 0 && n > opts.max_coords_per_var && coord_rng != nullptr) {
            for (int i = 0; i < opts.max_coords_per_var; ++i) {
                const int j = i + coord_rng->next_int(n - i);
                std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
            }
            coords.resize(static_cast<std::size_t>(opts.max_coords_per_var));
        }

        for (int c : coords) {
            const double saved = var->value[static_cast<std::size_t>(c)];
            var->value[static_cast<std::size_t>(c)] = saved + h;
            Tape tp;
            const double fp = forward(tp).scalar();
            var->value[static_cast<std::size_t>(c)] = saved - h;
            Tape tm;
            const double fm = forward(tm).scalar();
            var->value[static_cast<std::size_t>(c)] = saved;

            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = var->grad[static_cast<std::size_t>(c)];
            if (std::abs(analytic) <= opts.zero_tol && std::abs(numeric) <= opts.zero_tol) {
                ++report.coords_checked;
                continue;
            }
            const double err = relative_error(analytic, numeric);
            ++report.coords_checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_var = var->name;
                report.worst_coord = c;
            }
        }
    }
    return report;
}

}  // namespace treeqn
