#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "catnet/autodiff.hpp"
#include "catnet/cat_attention.hpp"
#include "catnet/volume.hpp"

namespace catnet {

/// Structure of the encoder–decoder. Scales are indexed 0..L, scale 0 being
/// full resolution with filters[0] channels and scale L the bottleneck.
struct NetworkConfig {
    std::size_t scales = 3;  // L
    std::vector<std::size_t> filters{8, 16, 32, 64};
    std::size_t slices = 12;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t in_channels = 1;
    std::size_t classes = kNumClasses;
    std::size_t blocks = 2;  // N
    std::size_t heads = 3;   // H
    std::size_t pool = 2;    // k
    std::vector<std::size_t> cat_layers{0, 1, 2, 3};
    bool pe_enabled = true;
    bool transformer_enabled = true;

    /// Throws ConfigError describing the first violated constraint.
    void validate() const;
    bool cat_enabled(std::size_t scale) const;
};

template <typename T>
struct ConvBlockParams {
    Tensor<T> kernel;  // 3×3×c_in×c_out
    Tensor<T> gain;
    Tensor<T> bias;
    std::size_t stride = 1;
};

template <typename T>
struct DecoderStageParams {
    Tensor<T> up;  // 1×1×f_{s+1}×f_s, applied after nearest 2× upsampling
    ConvBlockParams<T> fuse;
    ConvBlockParams<T> refine;
};

template <typename T>
struct SegNet {
    NetworkConfig config;
    std::vector<std::vector<ConvBlockParams<T>>> encoder;  // L+1 stages of two blocks
    std::vector<DecoderStageParams<T>> decoder;            // stages 0..L-1
    std::vector<std::optional<CatModuleParams<T>>> cats;   // L+1 entries
    Tensor<T> head_kernel;                                 // 1×1×f_0×classes
    Tensor<T> head_bias;
};

/// He-uniform convolution weights, unit norm gains, zero biases.
template <typename T>
SegNet<T> make_segnet(const NetworkConfig& config, std::uint64_t seed);

/// Stable hierarchical names such as "enc1.conv0.kernel" or "cat2.block0.head1.wq".
template <typename T>
std::vector<NamedTensor<T>> named_parameters(SegNet<T>& net);

/// Number of trainable scalars; depends on the config only.
std::size_t parameter_count(const NetworkConfig& config);

/// Multi-scale features x_0..x_L. Slices are independent batch entries here.
template <typename T>
std::vector<Var<T>> encoder_forward(const Var<T>& x0, SegNet<T>& net);

template <typename T>
struct CatSkipResult {
    std::vector<Var<T>> skips;
    std::vector<AttentionRecord<T>> records;
};

/// CAT_i(x_i) for enabled scales, identity elsewhere.
template <typename T>
CatSkipResult<T> apply_cat_modules(const std::vector<Var<T>>& features, SegNet<T>& net, bool capture);

/// d_L = skips[L]; d_i = D_i(skips[i], up(d_{i+1})); returns l×h×w×classes logits.
template <typename T>
Var<T> decoder_forward(const std::vector<Var<T>>& skips, SegNet<T>& net);

template <typename T>
struct ForwardResult {
    Var<T> logits;
    std::vector<AttentionRecord<T>> records;
};

template <typename T>
ForwardResult<T> catnet_forward(const Var<T>& x0, SegNet<T>& net, bool capture = false);

/// Inference on a grad-disabled tape.
template <typename T>
Tensor<T> infer_logits(SegNet<T>& net, const Tensor<T>& x0, std::vector<AttentionRecord<T>>* records = nullptr);

/// Per-voxel argmax over the class axis; exact ties go to the lowest class.
template <typename T>
LabelVolume predict_mask(const Tensor<T>& logits);

} // namespace catnet
