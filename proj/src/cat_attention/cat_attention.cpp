#include "catnet/cat_attention.hpp"

#include <cmath>

#include "catnet/init.hpp"

namespace catnet {

template <typename T>
HeadVars<T> bind(Tape<T>& tape, AttentionHeadParams<T>& head) {
    return {tape.parameter(head.wq), tape.parameter(head.wk), tape.parameter(head.wv)};
}

template <typename T>
BlockVars<T> bind(Tape<T>& tape, TransformerBlockParams<T>& block) {
    BlockVars<T> v;
    for (auto& h : block.heads) v.heads.push_back(bind(tape, h));
    v.w1 = tape.parameter(block.w1);
    v.b1 = tape.parameter(block.b1);
    v.w2 = tape.parameter(block.w2);
    v.b2 = tape.parameter(block.b2);
    v.ln1_gain = tape.parameter(block.ln1_gain);
    v.ln1_bias = tape.parameter(block.ln1_bias);
    v.ln2_gain = tape.parameter(block.ln2_gain);
    v.ln2_bias = tape.parameter(block.ln2_bias);
    return v;
}

template <typename T>
CrossSliceAttentionResult<T> cross_slice_attention(const Var<T>& x, const HeadVars<T>& head, std::size_t pool) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw DimensionError("cross_slice_attention: expected l×h×w×c input, got " + shape_str(s));
    const std::size_t c = s[3];
    for (const Var<T>* w : {&head.wq, &head.wk, &head.wv}) {
        if (w->shape() != Shape{c, c}) {
            throw DimensionError("cross_slice_attention: projection " + shape_str(w->shape()) +
                                 " must be square with side " + std::to_string(c));
        }
    }
    const std::size_t l = s[0];
    const Var<T> pooled = avg_pool2d(x, pool);
    const std::size_t key_width = pooled.value().size() / l;

    const Var<T> q = reshape(matmul_4d(pooled, head.wq), {l, key_width});
    const Var<T> k = reshape(matmul_4d(pooled, head.wk), {l, key_width});
    const Var<T> v = reshape(matmul_4d(x, head.wv), {l, x.value().size() / l});

    const double divisor = std::sqrt(static_cast<double>(key_width));
    const Var<T> logits = scale(matmul(q, k, true), static_cast<T>(1.0 / divisor));
    const Var<T> a = softmax(logits, 1);
    const Var<T> y = reshape(matmul(a, v), s);
    return {y, a, logits, divisor};
}

template <typename T>
MultiHeadResult<T> multi_head_attention(const Var<T>& x, const std::vector<HeadVars<T>>& heads, std::size_t pool) {
    if (heads.empty()) throw ConfigError("multi_head_attention: at least one head is required");
    MultiHeadResult<T> out;
    std::vector<Var<T>> ys;
    for (const auto& h : heads) {
        auto r = cross_slice_attention(x, h, pool);
        ys.push_back(r.y);
        out.attention.push_back(r.attention);
    }
    out.y = ys.size() == 1 ? ys.front() : concat_channels(ys);
    return out;
}

template <typename T>
BlockResult<T> transformer_block(const Var<T>& x, const BlockVars<T>& block, std::size_t pool) {
    auto mha = multi_head_attention(x, block.heads, pool);
    const Var<T> branch1 = gelu(add_channel_bias(matmul_4d(mha.y, block.w1), block.b1));
    const Var<T> z_int = layer_norm(add(branch1, x), block.ln1_gain, block.ln1_bias, kNormEps);
    const Var<T> branch2 = gelu(add_channel_bias(matmul_4d(z_int, block.w2), block.b2));
    const Var<T> z = layer_norm(add(branch2, z_int), block.ln2_gain, block.ln2_bias, kNormEps);
    return {z, std::move(mha.attention)};
}

template <typename T>
Tensor<T> init_positional_encoding(std::size_t slices, std::size_t channels) {
    if (channels < 2) throw ConfigError("positional encoding needs at least 2 channels");
    Tensor<T> pe(Shape{slices, 1, 1, channels});
    for (std::size_t p = 0; p < slices; ++p) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t even = ch - ch % 2;
            const double angle = static_cast<double>(p) /
                                 std::pow(10000.0, static_cast<double>(even) / static_cast<double>(channels));
            pe[p * channels + ch] = static_cast<T>(ch % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

template <typename T>
CatModuleParams<T> make_cat_module(std::size_t slices, std::size_t channels, std::size_t blocks, std::size_t heads,
                                   std::size_t pool, std::mt19937_64& rng) {
    if (blocks == 0) throw ConfigError("CAT module needs at least one transformer block");
    if (heads == 0) throw ConfigError("CAT module needs at least one attention head");
    if (pool == 0) throw ConfigError("CAT module pooling size must be positive");
    CatModuleParams<T> m;
    m.pe = init_positional_encoding<T>(slices, channels);
    m.pool = pool;
    const std::size_t c = channels;
    for (std::size_t b = 0; b < blocks; ++b) {
        TransformerBlockParams<T> block;
        for (std::size_t h = 0; h < heads; ++h) {
            AttentionHeadParams<T> head;
            head.wq = he_uniform<T>({c, c}, c, rng);
            head.wk = he_uniform<T>({c, c}, c, rng);
            head.wv = he_uniform<T>({c, c}, c, rng);
            block.heads.push_back(std::move(head));
        }
        block.w1 = he_uniform<T>({heads * c, c}, heads * c, rng);
        block.b1 = Tensor<T>(Shape{c});
        block.w2 = he_uniform<T>({c, c}, c, rng);
        block.b2 = Tensor<T>(Shape{c});
        block.ln1_gain = Tensor<T>(Shape{c}, T{1});
        block.ln1_bias = Tensor<T>(Shape{c});
        block.ln2_gain = Tensor<T>(Shape{c}, T{1});
        block.ln2_bias = Tensor<T>(Shape{c});
        m.blocks.push_back(std::move(block));
    }
    return m;
}

template <typename T>
CatModuleResult<T> cat_module_forward(const Var<T>& x, CatModuleParams<T>& params, int layer, bool capture) {
    if (x.shape().size() != 4 || x.shape()[0] != params.slices()) {
        throw ConfigError("CAT module at layer " + std::to_string(layer) + " expects " +
                          std::to_string(params.slices()) + " slices, input is " + shape_str(x.shape()));
    }
    if (x.shape()[3] != params.channels()) {
        throw DimensionError("CAT module at layer " + std::to_string(layer) + " expects " +
                             std::to_string(params.channels()) + " channels, input is " + shape_str(x.shape()));
    }
    Tape<T>& tape = *x.tape();
    CatModuleResult<T> out;
    Var<T> z = x;
    if (params.pe_enabled) z = add_slice_encoding(z, tape.parameter(params.pe));
    if (params.transformer_enabled) {
        for (std::size_t b = 0; b < params.blocks.size(); ++b) {
            auto r = transformer_block(z, bind(tape, params.blocks[b]), params.pool);
            z = r.z;
            if (capture) {
                for (std::size_t h = 0; h < r.attention.size(); ++h) {
                    out.records.push_back({layer, static_cast<int>(b), static_cast<int>(h), r.attention[h].value()});
                }
            }
        }
    }
    out.z = z;
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> named_parameters(CatModuleParams<T>& params, const std::string& prefix) {
    std::vector<NamedTensor<T>> out{{prefix + ".pe", &params.pe}};
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        auto& blk = params.blocks[b];
        const std::string bp = prefix + ".block" + std::to_string(b);
        for (std::size_t h = 0; h < blk.heads.size(); ++h) {
            const std::string hp = bp + ".head" + std::to_string(h);
            out.push_back({hp + ".wq", &blk.heads[h].wq});
            out.push_back({hp + ".wk", &blk.heads[h].wk});
            out.push_back({hp + ".wv", &blk.heads[h].wv});
        }
        out.push_back({bp + ".w1", &blk.w1});
        out.push_back({bp + ".b1", &blk.b1});
        out.push_back({bp + ".w2", &blk.w2});
        out.push_back({bp + ".b2", &blk.b2});
        out.push_back({bp + ".ln1.gain", &blk.ln1_gain});
        out.push_back({bp + ".ln1.bias", &blk.ln1_bias});
        out.push_back({bp + ".ln2.gain", &blk.ln2_gain});
        out.push_back({bp + ".ln2.bias", &blk.ln2_bias});
    }
    return out;
}

#define CATNET_INSTANTIATE_CAT(T)                                                                                 \
    template HeadVars<T> bind(Tape<T>&, AttentionHeadParams<T>&);                                                 \
    template BlockVars<T> bind(Tape<T>&, TransformerBlockParams<T>&);                                             \
    template CrossSliceAttentionResult<T> cross_slice_attention(const Var<T>&, const HeadVars<T>&, std::size_t);  \
    template MultiHeadResult<T> multi_head_attention(const Var<T>&, const std::vector<HeadVars<T>>&, std::size_t); \
    template BlockResult<T> transformer_block(const Var<T>&, const BlockVars<T>&, std::size_t);                   \
    template Tensor<T> init_positional_encoding<T>(std::size_t, std::size_t);                                     \
    template CatModuleParams<T> make_cat_module<T>(std::size_t, std::size_t, std::size_t, std::size_t,            \
                                                   std::size_t, std::mt19937_64&);                                \
    template CatModuleResult<T> cat_module_forward(const Var<T>&, CatModuleParams<T>&, int, bool);                \
    template std::vector<NamedTensor<T>> named_parameters(CatModuleParams<T>&, const std::string&);

CATNET_INSTANTIATE_CAT(float)
CATNET_INSTANTIATE_CAT(double)

#undef CATNET_INSTANTIATE_CAT

} // namespace catnet
