#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "catnet/tensor.hpp"

// Forward kernels and their vector-Jacobian products. All feature stacks use
// (l, h, w, c) layout; l is a batch axis for every op except the attention
// product, which lives in cat_attention.
//
// Backward functions accumulate into the output gradient spans (+=). An empty
// span means that gradient is not requested.
namespace catnet::ops {

template <typename T>
Tensor<T> matmul_4d(const Tensor<T>& b, const Tensor<T>& w);
template <typename T>
void matmul_4d_backward(const Tensor<T>& b, const Tensor<T>& w, std::span<const T> grad_out,
                        std::span<T> grad_b, std::span<T> grad_w);

/// Plain 2D product a·b, or a·bᵀ when transpose_b is set.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, std::span<const T> grad_out,
                     std::span<T> grad_a, std::span<T> grad_b);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t dim);
template <typename T>
void softmax_backward(const Tensor<T>& y, std::size_t dim, std::span<const T> grad_out, std::span<T> grad_x);

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
template <typename T>
void avg_pool2d_backward(const Shape& x_shape, std::size_t k, std::span<const T> grad_out, std::span<T> grad_x);

/// Exact erf-based GELU: x·Φ(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
void gelu_backward(const Tensor<T>& x, std::span<const T> grad_out, std::span<T> grad_x);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T>
void leaky_relu_backward(const Tensor<T>& x, T slope, std::span<const T> grad_out, std::span<T> grad_x);

/// Normalized output plus the per-group statistics needed for the backward pass.
template <typename T>
struct NormResult {
    Tensor<T> y;
    std::vector<double> mean;
    std::vector<double> inv_std;
};

/// Per-slice normalization over all h·w·c elements, then per-channel affine.
template <typename T>
NormResult<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps);
template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const NormResult<T>& fwd,
                         std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_gain,
                         std::span<T> grad_bias);

/// Per-slice, per-channel normalization over h·w, then per-channel affine.
template <typename T>
NormResult<T> instance_norm2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps);
template <typename T>
void instance_norm2d_backward(const Tensor<T>& x, const Tensor<T>& gain, const NormResult<T>& fwd,
                              std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_gain,
                              std::span<T> grad_bias);

/// Zero-padded cross-correlation. kernel is kh×kw×c_in×c_out.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                     std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_kernel);

/// Nearest-neighbour 2x upsampling over h and w.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);
template <typename T>
void upsample2x_backward(const Shape& x_shape, std::span<const T> grad_out, std::span<T> grad_x);

/// Mean over voxels of −log softmax(logits)[label]. labels has l·h·w entries.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels);
template <typename T>
void cross_entropy_backward(const Tensor<T>& logits, std::span<const std::uint8_t> labels, T grad_out,
                            std::span<T> grad_logits);

/// Concatenation along the last axis, in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);

/// x + bias, bias of shape (c) broadcast over all leading axes.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// x + enc, enc of shape (l,1,1,c) broadcast over h and w.
template <typename T>
Tensor<T> add_slice_encoding(const Tensor<T>& x, const Tensor<T>& enc);

} // namespace catnet::ops
