#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "catnet/autodiff.hpp"

namespace catnet {

/// Builds the op under test on a tape from leaf inputs.
using GradFunction = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

/// Denominator floor for the relative error |a − n| / max(|a|, |n|, floor).
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares tape gradients with central finite differences at 64-bit.
///
/// A non-scalar output is reduced to Σ out_i·r_i with fixed pseudo-random
/// weights r, so every output element contributes to the checked gradient.
GradCheckResult grad_check(const GradFunction& op, const std::vector<Tensor<double>>& points, double eps = 1e-5,
                           std::uint64_t projection_seed = 0x5eed);

inline GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& op,
                                  const Tensor<double>& point, double eps = 1e-5) {
    return grad_check([&op](Tape<double>&, const std::vector<Var<double>>& in) { return op(in[0]); },
                      std::vector<Tensor<double>>{point}, eps);
}

} // namespace catnet
