#pragma once

#include <random>
#include <string>
#include <vector>

#include "catnet/autodiff.hpp"

namespace catnet {

/// Non-owning handle to a learnable tensor with a stable hierarchical name.
template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
};

/// Query/key/value projections of one head, each c×c.
template <typename T>
struct AttentionHeadParams {
    Tensor<T> wq, wk, wv;
};

template <typename T>
struct TransformerBlockParams {
    std::vector<AttentionHeadParams<T>> heads;
    Tensor<T> w1;  // (H·c)×c
    Tensor<T> b1;  // c
    Tensor<T> w2;  // c×c
    Tensor<T> b2;  // c
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> ln2_gain, ln2_bias;
};

/// Positional encoding followed by N transformer blocks, for one network scale.
template <typename T>
struct CatModuleParams {
    Tensor<T> pe;  // l×1×1×c, sinusoid at init, learned; broadcast over h and w
    std::vector<TransformerBlockParams<T>> blocks;
    std::size_t pool = 2;
    bool pe_enabled = true;
    bool transformer_enabled = true;

    std::size_t slices() const { return pe.dim(0); }
    std::size_t channels() const { return pe.dim(3); }
};

/// One attention matrix A (l×l) captured during a forward pass.
template <typename T>
struct AttentionRecord {
    int layer = 0;
    int block = 0;
    int head = 0;
    Tensor<T> attention;
};

// Tape-bound views of the parameter structs. Building them from leaves lets
// gradient checks treat weights as free inputs.

template <typename T>
struct HeadVars {
    Var<T> wq, wk, wv;
};

template <typename T>
struct BlockVars {
    std::vector<HeadVars<T>> heads;
    Var<T> w1, b1, w2, b2;
    Var<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

template <typename T>
HeadVars<T> bind(Tape<T>& tape, AttentionHeadParams<T>& head);
template <typename T>
BlockVars<T> bind(Tape<T>& tape, TransformerBlockParams<T>& block);

template <typename T>
struct CrossSliceAttentionResult {
    Var<T> y;          // l×h×w×c
    Var<T> attention;  // l×l, row-stochastic
    Var<T> logits;     // l×l, QKᵀ already divided by the scale
    double scale = 1.0;
};

/// Attention between whole slices. Queries and keys come from the k×k
/// average-pooled stack, values from the full-resolution stack; each slice is
/// flattened in (h, w, c) order before the l×l similarity is formed.
template <typename T>
CrossSliceAttentionResult<T> cross_slice_attention(const Var<T>& x, const HeadVars<T>& head, std::size_t pool);

template <typename T>
struct MultiHeadResult {
    Var<T> y;  // l×h×w×(H·c), heads concatenated in order
    std::vector<Var<T>> attention;
};

template <typename T>
MultiHeadResult<T> multi_head_attention(const Var<T>& x, const std::vector<HeadVars<T>>& heads, std::size_t pool);

template <typename T>
struct BlockResult {
    Var<T> z;
    std::vector<Var<T>> attention;
};

/// z_int = LN1(GELU(y·W1 + b1) + x);  z = LN2(GELU(z_int·W2 + b2) + z_int).
template <typename T>
BlockResult<T> transformer_block(const Var<T>& x, const BlockVars<T>& block, std::size_t pool);

/// Sinusoidal initial slice encoding, shape l×1×1×c.
template <typename T>
Tensor<T> init_positional_encoding(std::size_t slices, std::size_t channels);

/// Fresh CAT parameters: He-uniform projections, unit/zero norm affines, sinusoidal PE.
/// Throws ConfigError when blocks or heads is zero.
template <typename T>
CatModuleParams<T> make_cat_module(std::size_t slices, std::size_t channels, std::size_t blocks, std::size_t heads,
                                   std::size_t pool, std::mt19937_64& rng);

template <typename T>
struct CatModuleResult {
    Var<T> z;
    std::vector<AttentionRecord<T>> records;
};

/// x + PE (when enabled), then the transformer blocks in sequence (when enabled).
/// Attention matrices are copied into records when capture is set.
template <typename T>
CatModuleResult<T> cat_module_forward(const Var<T>& x, CatModuleParams<T>& params, int layer, bool capture);

template <typename T>
std::vector<NamedTensor<T>> named_parameters(CatModuleParams<T>& params, const std::string& prefix);

} // namespace catnet
