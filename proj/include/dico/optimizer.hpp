#pragma once

// AdamW: adaptive moment estimation with bias correction and decoupled
// weight decay (decay applied directly to the weights, scaled by lr).

#include <cmath>
#include <vector>

#include "dico/config.hpp"
#include "dico/error.hpp"
#include "dico/tensor.hpp"

namespace dico {

template <typename T>
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int step_count = 0;
    std::vector<std::vector<T>> m, v; // first/second moments, one slot per parameter

    AdamW() = default;
    explicit AdamW(const OptimConfig& oc)
        : lr(oc.lr), beta1(oc.beta1), beta2(oc.beta2), eps(oc.eps),
          weight_decay(oc.weight_decay) {}

    void init(const std::vector<Parameter<T>*>& params) {
        m.clear();
        v.clear();
        for (auto* p : params) {
            m.emplace_back(p->numel(), T(0));
            v.emplace_back(p->numel(), T(0));
        }
        step_count = 0;
    }

    void step(const std::vector<Parameter<T>*>& params) {
        if (params.size() != m.size())
            throw ShapeError(cat("optimizer_step: ", params.size(), " parameters vs ",
                                 m.size(), " moment slots"));
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, step_count);
        const double bc2 = 1.0 - std::pow(beta2, step_count);
        for (size_t pi = 0; pi < params.size(); ++pi) {
            Parameter<T>& p = *params[pi];
            if (p.grad.size() != p.value.size())
                throw ShapeError(cat("optimizer_step: parameter '", p.name,
                                     "' has no gradient of matching shape"));
            auto& mi = m[pi];
            auto& vi = v[pi];
            for (size_t j = 0; j < p.value.size(); ++j) {
                const double g = static_cast<double>(p.grad[j]);
                const double mj = beta1 * static_cast<double>(mi[j]) + (1.0 - beta1) * g;
                const double vj = beta2 * static_cast<double>(vi[j]) + (1.0 - beta2) * g * g;
                mi[j] = static_cast<T>(mj);
                vi[j] = static_cast<T>(vj);
                const double m_hat = mj / bc1;
                const double v_hat = vj / bc2;
                const double upd = m_hat / (std::sqrt(v_hat) + eps) +
                                   weight_decay * static_cast<double>(p.value[j]);
                p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - lr * upd);
            }
        }
    }
};

} // namespace dico
