#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace catnet {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update with decoupled weight decay:
/// θ ← θ − lr·wd·θ, then θ ← θ − lr·m̂/(√v̂ + eps).
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamConfig& config);

} // namespace catnet
