#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "advvae/tensor.hpp"

namespace advvae {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
};

// One bias-corrected Adam update. Weight decay is decoupled: each parameter is
// first shrunk by lr * weight_decay * param, then moved by the Adam step.
// The state is lazily sized on the first call.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace advvae
