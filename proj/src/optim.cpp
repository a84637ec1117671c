#include "advvae/optim.hpp"

#include <cmath>

#include "advvae/error.hpp"

namespace advvae {

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
    if (params.size() != grads.size()) {
        throw DimensionError("adam: parameter and gradient counts differ");
    }
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adam: optimizer state does not match parameter list");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        if (g.shape() != p.shape()) {
            throw DimensionError("adam: gradient shape " + shape_string(g.shape()) + " for parameter " +
                                 shape_string(p.shape()));
        }
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            if (cfg.weight_decay != 0.0) {
                p[i] -= cfg.lr * cfg.weight_decay * p[i];
            }
            p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        }
    }
}

}  // namespace advvae
