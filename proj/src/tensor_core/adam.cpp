#include "catnet/adam.hpp"

#include <cmath>
#include <string>

#include "catnet/errors.hpp"

namespace catnet {

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamConfig& config) {
    if (grads.size() != params.size()) {
        throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), T{0});
        state.v.assign(params.size(), T{0});
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adam_step: optimizer state does not match parameter size " +
                             std::to_string(params.size()));
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    const double decay = config.lr * config.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        double theta = static_cast<double>(params[i]);
        theta -= decay * theta;
        const double m = config.beta1 * static_cast<double>(state.m[i]) + (1.0 - config.beta1) * g;
        const double v = config.beta2 * static_cast<double>(state.v[i]) + (1.0 - config.beta2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        theta -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
        params[i] = static_cast<T>(theta);
    }
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&, const AdamConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&, const AdamConfig&);

} // namespace catnet
