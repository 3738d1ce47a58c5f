#pragma once

// Central-difference gradient verification. The workhorse behind the
// `gradcheck` CLI command and the per-op gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dico/error.hpp"
#include "dico/tensor.hpp"

namespace dico {

/// Builds the scalar objective on a caller-supplied fresh graph. The build
/// must be deterministic: it is evaluated many times under coordinate
/// perturbations of the checked parameter.
template <typename T>
using LossBuilder = std::function<Tensor<T>(Graph<T>&)>;

template <typename T>
struct FdReport {
    double max_rel_err = 0.0;
    size_t worst_coord = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

namespace detail {

template <typename T>
T eval_scalar(const LossBuilder<T>& f) {
    Graph<T> g;
    Tensor<T> loss = f(g);
    if (loss.numel() != 1)
        throw GraphError(cat("finite_difference_check: objective must be scalar, got ",
                             shape_str(loss.shape())));
    return loss.value()[0];
}

} // namespace detail

/// Compares the analytic gradient of `f` w.r.t. `theta` against central
/// differences (f(t+h e_i) - f(t-h e_i)) / 2h, coordinate by coordinate.
/// Returns max_i |numeric_i - analytic_i| / max(1, |analytic_i|).
///
/// theta.grad is cleared and repopulated as a side effect. Gradients of other
/// parameters touched by `f` also accumulate; callers that care should zero
/// them afterwards.
template <typename T>
FdReport<T> finite_difference_report(const LossBuilder<T>& f, Parameter<T>& theta, T h) {
    if (!(h > T(0)))
        throw OracleError("finite_difference_check: step h must be positive");
    const T base1 = detail::eval_scalar(f);
    const T base2 = detail::eval_scalar(f);
    if (base1 != base2)
        throw OracleError(cat("finite_difference_check: objective is not deterministic (",
                              base1, " vs ", base2, ")"));

    theta.zero_grad();
    {
        Graph<T> g;
        Tensor<T> loss = f(g);
        if (loss.numel() != 1)
            throw GraphError("finite_difference_check: objective must be scalar");
        g.backward(loss);
    }
    std::vector<T> analytic = theta.grad;

    FdReport<T> report;
    for (size_t i = 0; i < theta.numel(); ++i) {
        const T saved = theta.value[i];
        theta.value[i] = saved + h;
        const T fp = detail::eval_scalar(f);
        theta.value[i] = saved - h;
        const T fm = detail::eval_scalar(f);
        theta.value[i] = saved;
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                               (2.0 * static_cast<double>(h));
        const double a = static_cast<double>(analytic[i]);
        const double rel = std::abs(numeric - a) / std::max(1.0, std::abs(a));
        if (rel >= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    return report;
}

/// Convenience: only the max relative error.
template <typename T>
double finite_difference_check(const LossBuilder<T>& f, Parameter<T>& theta, T h) {
    return finite_difference_report(f, theta, h).max_rel_err;
}

} // namespace dico
