#pragma once

#include <cmath>
#include <random>

#include "catnet/tensor.hpp"

namespace catnet {

/// Uniform He fan-in initialization: U(−√(6/fan_in), √(6/fan_in)).
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

} // namespace catnet
