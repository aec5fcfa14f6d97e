#include "catnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace catnet {

namespace {

double projected(const Tensor<double>& out, const std::vector<double>& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
}

double evaluate(const GradFunction& op, const std::vector<Tensor<double>>& points, const std::vector<double>& weights) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<double>> in;
    for (const auto& p : points) in.push_back(tape.constant(p));
    return projected(op(tape, in).value(), weights);
}

} // namespace

GradCheckResult grad_check(const GradFunction& op, const std::vector<Tensor<double>>& points, double eps,
                           std::uint64_t projection_seed) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p));
    Var<double> out = op(tape, leaves);

    std::mt19937_64 rng(projection_seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> weights(out.value().size());
    for (auto& w : weights) w = dist(rng);
    Var<double> loss = sum(mul(out, tape.constant(Tensor<double>(out.shape(), weights))));
    tape.backward(loss);

    GradCheckResult result;
    std::vector<Tensor<double>> probe = points;
    for (std::size_t t = 0; t < points.size(); ++t) {
        const auto analytic = tape.grad(leaves[t]);
        for (std::size_t i = 0; i < points[t].size(); ++i) {
            const double original = points[t][i];
            probe[t][i] = original + eps;
            const double plus = evaluate(op, probe, weights);
            probe[t][i] = original - eps;
            const double minus = evaluate(op, probe, weights);
            probe[t][i] = original;

            const double numeric = (plus - minus) / (2.0 * eps);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double abs_err = std::abs(a - numeric);
            const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
            ++result.checked;
        }
    }
    return result;
}

} // namespace catnet
