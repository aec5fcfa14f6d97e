#include <random>

#include "catnet/grad_check.hpp"
#include "catnet/trainer.hpp"

namespace catnet {

namespace {

using In = std::vector<Var<double>>;
using T4 = Tensor<double>;

T4 uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    T4 t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

struct Case {
    std::string name;
    std::function<std::vector<T4>(std::mt19937_64&)> points;
    GradFunction op;
};

// Weights of one transformer block laid out after the input: 3 per head, then
// w1, b1, w2, b2 and the two LayerNorm affines.
std::vector<T4> block_points(std::size_t l, std::size_t hw, std::size_t c, std::size_t heads, std::mt19937_64& rng) {
    std::vector<T4> p{uniform({l, hw, hw, c}, rng, -2, 2)};
    const double s = 1.0 / std::sqrt(static_cast<double>(c));
    for (std::size_t h = 0; h < heads; ++h) {
        for (int j = 0; j < 3; ++j) p.push_back(uniform({c, c}, rng, -s, s));
    }
    p.push_back(uniform({heads * c, c}, rng, -s, s));
    p.push_back(uniform({c}, rng, -0.5, 0.5));
    p.push_back(uniform({c, c}, rng, -s, s));
    p.push_back(uniform({c}, rng, -0.5, 0.5));
    p.push_back(uniform({c}, rng, 0.5, 1.5));
    p.push_back(uniform({c}, rng, -0.5, 0.5));
    p.push_back(uniform({c}, rng, 0.5, 1.5));
    p.push_back(uniform({c}, rng, -0.5, 0.5));
    return p;
}

BlockVars<double> block_vars(const In& in, std::size_t first, std::size_t heads) {
    BlockVars<double> v;
    std::size_t i = first;
    for (std::size_t h = 0; h < heads; ++h, i += 3) v.heads.push_back({in[i], in[i + 1], in[i + 2]});
    v.w1 = in[i++];
    v.b1 = in[i++];
    v.w2 = in[i++];
    v.b2 = in[i++];
    v.ln1_gain = in[i++];
    v.ln1_bias = in[i++];
    v.ln2_gain = in[i++];
    v.ln2_bias = in[i++];
    return v;
}

std::vector<Case> suite_cases() {
    const std::vector<std::uint8_t> labels{0, 1, 2, 2, 1, 0, 1, 2};
    std::vector<Case> cases{
        {"add", [](auto& r) { return std::vector{uniform({2, 3}, r), uniform({2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return add(in[0], in[1]); }},
        {"mul", [](auto& r) { return std::vector{uniform({2, 3}, r), uniform({2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return mul(in[0], in[1]); }},
        {"scale", [](auto& r) { return std::vector{uniform({2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return scale(in[0], -1.7); }},
        {"sum", [](auto& r) { return std::vector{uniform({2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return sum(in[0]); }},
        {"mean", [](auto& r) { return std::vector{uniform({2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return mean(in[0]); }},
        {"reshape", [](auto& r) { return std::vector{uniform({2, 3, 2}, r)}; },
         [](Tape<double>&, const In& in) { return reshape(in[0], {3, 4}); }},
        {"matmul_4d", [](auto& r) { return std::vector{uniform({2, 2, 2, 3}, r), uniform({3, 4}, r)}; },
         [](Tape<double>&, const In& in) { return matmul_4d(in[0], in[1]); }},
        {"matmul", [](auto& r) { return std::vector{uniform({3, 4}, r), uniform({4, 2}, r)}; },
         [](Tape<double>&, const In& in) { return matmul(in[0], in[1]); }},
        {"matmul transposed", [](auto& r) { return std::vector{uniform({3, 4}, r), uniform({5, 4}, r)}; },
         [](Tape<double>&, const In& in) { return matmul(in[0], in[1], true); }},
        {"softmax", [](auto& r) { return std::vector{uniform({3, 4}, r, -2, 2)}; },
         [](Tape<double>&, const In& in) { return softmax(in[0], 1); }},
        {"avg_pool2d", [](auto& r) { return std::vector{uniform({2, 4, 4, 2}, r)}; },
         [](Tape<double>&, const In& in) { return avg_pool2d(in[0], 2); }},
        {"gelu", [](auto& r) { return std::vector{uniform({2, 2, 2, 2}, r, -3, 3)}; },
         [](Tape<double>&, const In& in) { return gelu(in[0]); }},
        {"leaky_relu", [](auto& r) { return std::vector{uniform({2, 2, 2, 2}, r, -3, 3)}; },
         [](Tape<double>&, const In& in) { return leaky_relu(in[0], kLeakySlope); }},
        {"layer_norm", [](auto& r) { return std::vector{uniform({2, 3, 3, 2}, r), uniform({2}, r), uniform({2}, r)}; },
         [](Tape<double>&, const In& in) { return layer_norm(in[0], in[1], in[2], kNormEps); }},
        {"instance_norm2d",
         [](auto& r) { return std::vector{uniform({2, 3, 3, 2}, r), uniform({2}, r), uniform({2}, r)}; },
         [](Tape<double>&, const In& in) { return instance_norm2d(in[0], in[1], in[2], kNormEps); }},
        {"conv2d", [](auto& r) { return std::vector{uniform({2, 4, 4, 2}, r), uniform({3, 3, 2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return conv2d(in[0], in[1], 1, 1); }},
        {"conv2d stride 2", [](auto& r) { return std::vector{uniform({1, 5, 5, 2}, r), uniform({3, 3, 2, 2}, r)}; },
         [](Tape<double>&, const In& in) { return conv2d(in[0], in[1], 2, 1); }},
        {"upsample2x", [](auto& r) { return std::vector{uniform({2, 2, 2, 2}, r)}; },
         [](Tape<double>&, const In& in) { return upsample2x(in[0]); }},
        {"concat_channels", [](auto& r) { return std::vector{uniform({2, 2, 2, 1}, r), uniform({2, 2, 2, 3}, r)}; },
         [](Tape<double>&, const In& in) { return concat_channels(std::vector{in[0], in[1]}); }},
        {"add_channel_bias", [](auto& r) { return std::vector{uniform({2, 2, 2, 3}, r), uniform({3}, r)}; },
         [](Tape<double>&, const In& in) { return add_channel_bias(in[0], in[1]); }},
        {"add_slice_encoding", [](auto& r) { return std::vector{uniform({3, 2, 2, 2}, r), uniform({3, 1, 1, 2}, r)}; },
         [](Tape<double>&, const In& in) { return add_slice_encoding(in[0], in[1]); }},
        {"cross_entropy", [](auto& r) { return std::vector{uniform({2, 2, 2, 3}, r, -2, 2)}; },
         [labels](Tape<double>&, const In& in) { return cross_entropy(in[0], labels); }},
        {"cross_slice_attention",
         [](auto& r) {
             return std::vector{uniform({3, 4, 4, 2}, r, -2, 2), uniform({2, 2}, r), uniform({2, 2}, r),
                                uniform({2, 2}, r)};
         },
         [](Tape<double>&, const In& in) { return cross_slice_attention(in[0], {in[1], in[2], in[3]}, 2).y; }},
        {"multi_head_attention",
         [](auto& r) {
             std::vector p{uniform({3, 4, 4, 2}, r, -2, 2)};
             for (int j = 0; j < 6; ++j) p.push_back(uniform({2, 2}, r));
             return p;
         },
         [](Tape<double>&, const In& in) {
             return multi_head_attention(in[0], {{in[1], in[2], in[3]}, {in[4], in[5], in[6]}}, 2).y;
         }},
        {"transformer_block", [](auto& r) { return block_points(2, 4, 2, 2, r); },
         [](Tape<double>&, const In& in) { return transformer_block(in[0], block_vars(in, 1, 2), 2).z; }},
        {"transformer_block x2 with slice encoding",
         [](auto& r) {
             auto p = block_points(3, 4, 2, 1, r);
             auto second = block_points(3, 4, 2, 1, r);
             p.insert(p.end(), second.begin() + 1, second.end());
             p.push_back(init_positional_encoding<double>(3, 2));
             return p;
         },
         [](Tape<double>&, const In& in) {
             const auto z = add_slice_encoding(in[0], in.back());
             const auto z1 = transformer_block(z, block_vars(in, 1, 1), 2).z;
             return transformer_block(z1, block_vars(in, 12, 1), 2).z;
         }},
    };
    return cases;
}

} // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GradSuiteEntry> out;
    for (const auto& c : suite_cases()) {
        GradSuiteEntry e{c.name, 0.0, false};
        for (int trial = 0; trial < 3; ++trial) {
            e.max_rel_error = std::max(e.max_rel_error, grad_check(c.op, c.points(rng)).max_rel_error);
        }
        e.passed = e.max_rel_error < kGradSuiteTolerance;
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace catnet
