#pragma once

// Central finite-difference verification of the tape gradients.

#include <functional>
#include <vector>

#include "pgf/tensor.hpp"

namespace pgf {

// Compares the analytic gradient of f() w.r.t. every entry of every listed
// parameter against (f(th+eps) - f(th-eps)) / (2 eps). Returns the max over
// entries of |a - n| / max(|a|, |n|, 1e-8). f must be deterministic; it is
// evaluated twice up front and any disagreement is an error.
inline double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw value_error("grad_check: eps must lie in [1e-7, 1e-3]");
    double f0 = f().item();
    double f1 = f().item();
    if (f0 != f1) throw value_error("grad_check: f is not deterministic (" + std::to_string(f0) +
                                    " vs " + std::to_string(f1) + ")");

    for (auto& p : params) {
        if (!p.requires_grad())
            throw value_error("grad_check: parameter does not require grad");
        const_cast<Tensor&>(p).zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (auto& p : params) {
        Tensor t = p;
        analytic.push_back(t.grad());  // zeros if the parameter is unused
        t.zero_grad();
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        double* data = p.data();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            double saved = data[i];
            data[i] = saved + eps;
            double fp = f().item();
            data[i] = saved - eps;
            double fm = f().item();
            data[i] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi][i];
            double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace pgf
