#include "catnet/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace catnet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(std::span<const T> s, std::size_t rows, std::size_t cols) {
    return ConstMatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(std::span<T> s, std::size_t rows, std::size_t cols) {
    return MatMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                             shape_str(s));
    }
}

void require_channels(const Shape& x, const Shape& param, const char* op, const char* what) {
    if (param.size() != 1 || param[0] != x.back()) {
        throw DimensionError(std::string(op) + ": " + what + " shape " + shape_str(param) +
                             " does not match channel count of " + shape_str(x));
    }
}

struct ConvGeometry {
    std::size_t slices, in_h, in_w, in_c;
    std::size_t kh, kw, out_c;
    std::size_t out_h, out_w;
    std::size_t stride, padding;

    std::size_t patch() const { return kh * kw * in_c; }
    std::size_t out_pixels() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
    require_rank(x.shape(), 4, "conv2d");
    require_rank(kernel.shape(), 4, "conv2d");
    if (kernel.dim(2) != x.dim(3)) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                             std::to_string(kernel.dim(2)) + " input channels, input " + shape_str(x.shape()) +
                             " has " + std::to_string(x.dim(3)));
    }
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(1), kernel.dim(3), 0, 0,
                   stride, padding};
    if (g.in_h + 2 * padding < g.kh || g.in_w + 2 * padding < g.kw) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    g.out_h = (g.in_h + 2 * padding - g.kh) / stride + 1;
    g.out_w = (g.in_w + 2 * padding - g.kw) / stride + 1;
    return g;
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0; }

// Gathers the receptive fields of one slice into rows of (ky, kx, c_in).
template <typename T>
void im2col(const T* slice, const ConvGeometry& g, T* cols) {
    const std::size_t patch = g.patch();
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T* row = cols + (oy * g.out_w + ox) * patch;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                    T* dst = row + (ky * g.kw + kx) * g.in_c;
                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) || ix >= static_cast<long>(g.in_w)) {
                        std::fill(dst, dst + g.in_c, T{0});
                    } else {
                        const T* src = slice + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
                        std::copy(src, src + g.in_c, dst);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* slice) {
    const std::size_t patch = g.patch();
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const T* row = cols + (oy * g.out_w + ox) * patch;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                    if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
                    const T* src = row + (ky * g.kw + kx) * g.in_c;
                    T* dst = slice + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
                    for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

template <typename T>
void channel_sums(const T* xs, std::size_t pixels, std::size_t c, const double* center, double* sum, double* sq) {
    // One accumulator per channel keeps c independent add chains instead of one serial sum.
    std::fill(sum, sum + c, 0.0);
    if (sq) std::fill(sq, sq + c, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
        const T* row = xs + p * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = static_cast<double>(row[ch]) - (center ? center[ch] : 0.0);
            sum[ch] += d;
            if (sq) sq[ch] += d * d;
        }
    }
}

template <typename T>
void norm_backward_block(const T* x, const T* gy, T* gx, T* ggain, T* gbias, const T* gain, const double* mean,
                         const double* inv_std, std::size_t pixels, std::size_t c, bool shared_stats) {
    // x, gy and gx cover a contiguous pixels×c block. With shared_stats the statistics span the
    // whole block (layer norm), otherwise each channel has its own (instance norm).
    std::vector<double> sum_gy(c, 0.0), sum_gy_xhat(c, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
        const std::size_t o = p * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = static_cast<double>(gy[o + ch]);
            sum_gy[ch] += g;
            sum_gy_xhat[ch] += g * (static_cast<double>(x[o + ch]) - mean[ch]) * inv_std[ch];
        }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (ggain) ggain[ch] += static_cast<T>(sum_gy_xhat[ch]);
        if (gbias) gbias[ch] += static_cast<T>(sum_gy[ch]);
    }
    if (!gx) return;
    std::vector<double> mean_dxhat(c), mean_dxhat_xhat(c);
    if (shared_stats) {
        double a = 0.0, b = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            a += static_cast<double>(gain[ch]) * sum_gy[ch];
            b += static_cast<double>(gain[ch]) * sum_gy_xhat[ch];
        }
        const double n = static_cast<double>(pixels * c);
        std::fill(mean_dxhat.begin(), mean_dxhat.end(), a / n);
        std::fill(mean_dxhat_xhat.begin(), mean_dxhat_xhat.end(), b / n);
    } else {
        const double n = static_cast<double>(pixels);
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean_dxhat[ch] = static_cast<double>(gain[ch]) * sum_gy[ch] / n;
            mean_dxhat_xhat[ch] = static_cast<double>(gain[ch]) * sum_gy_xhat[ch] / n;
        }
    }
    for (std::size_t p = 0; p < pixels; ++p) {
        const std::size_t o = p * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double xhat = (static_cast<double>(x[o + ch]) - mean[ch]) * inv_std[ch];
            const double dxhat = static_cast<double>(gy[o + ch]) * static_cast<double>(gain[ch]);
            gx[o + ch] += static_cast<T>(inv_std[ch] * (dxhat - mean_dxhat[ch] - xhat * mean_dxhat_xhat[ch]));
        }
    }
}

template <typename T>
void norm_affine(const T* xs, const double* mean, const double* inv_std, const Tensor<T>& gain,
                 const Tensor<T>& bias, std::size_t pixels, std::size_t c, T* ys) {
    for (std::size_t p = 0; p < pixels; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double xhat = (static_cast<double>(xs[p * c + ch]) - mean[ch]) * inv_std[ch];
            ys[p * c + ch] = static_cast<T>(xhat * static_cast<double>(gain[ch]) + static_cast<double>(bias[ch]));
        }
    }
}

template <typename T>
T* ptr_or_null(std::span<T> s) {
    return s.empty() ? nullptr : s.data();
}

} // namespace

template <typename T>
Tensor<T> matmul_4d(const Tensor<T>& b, const Tensor<T>& w) {
    if (w.rank() != 2 || b.rank() == 0 || b.shape().back() != w.dim(0)) {
        throw DimensionError("matmul_4d: cannot multiply " + shape_str(b.shape()) + " by " + shape_str(w.shape()));
    }
    const std::size_t c = w.dim(0);
    const std::size_t m = w.dim(1);
    const std::size_t rows = b.size() / c;
    Shape out_shape = b.shape();
    out_shape.back() = m;
    Tensor<T> out(out_shape);
    as_matrix(out.data(), rows, m).noalias() = as_matrix(b.data(), rows, c) * as_matrix(w.data(), c, m);
    return out;
}

template <typename T>
void matmul_4d_backward(const Tensor<T>& b, const Tensor<T>& w, std::span<const T> grad_out, std::span<T> grad_b,
                        std::span<T> grad_w) {
    const std::size_t c = w.dim(0);
    const std::size_t m = w.dim(1);
    const std::size_t rows = b.size() / c;
    const auto g = as_matrix(grad_out, rows, m);
    if (!grad_b.empty()) as_matrix(grad_b, rows, c).noalias() += g * as_matrix(w.data(), c, m).transpose();
    if (!grad_w.empty()) as_matrix(grad_w, c, m).noalias() += as_matrix(b.data(), rows, c).transpose() * g;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: expected 2D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t inner_b = transpose_b ? b.dim(1) : b.dim(0);
    if (a.dim(1) != inner_b) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()) +
                             (transpose_b ? "ᵀ" : ""));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    Tensor<T> out(Shape{m, n});
    auto am = as_matrix(a.data(), m, k);
    if (transpose_b) {
        as_matrix(out.data(), m, n).noalias() = am * as_matrix(b.data(), n, k).transpose();
    } else {
        as_matrix(out.data(), m, n).noalias() = am * as_matrix(b.data(), k, n);
    }
    return out;
}

template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, std::span<const T> grad_out,
                     std::span<T> grad_a, std::span<T> grad_b) {
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    const auto g = as_matrix(grad_out, m, n);
    const auto am = as_matrix(a.data(), m, k);
    if (transpose_b) {
        const auto bm = as_matrix(b.data(), n, k);
        if (!grad_a.empty()) as_matrix(grad_a, m, k).noalias() += g * bm;
        if (!grad_b.empty()) as_matrix(grad_b, n, k).noalias() += g.transpose() * am;
    } else {
        const auto bm = as_matrix(b.data(), k, n);
        if (!grad_a.empty()) as_matrix(grad_a, m, k).noalias() += g * bm.transpose();
        if (!grad_b.empty()) as_matrix(grad_b, k, n).noalias() += am.transpose() * g;
    }
}

namespace {
struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t dim) {
    if (dim >= s.size()) {
        throw UsageError("softmax: axis " + std::to_string(dim) + " out of range for " + shape_str(s));
    }
    AxisSplit a{1, s[dim], 1};
    for (std::size_t i = 0; i < dim; ++i) a.outer *= s[i];
    for (std::size_t i = dim + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}
} // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t dim) {
    const AxisSplit a = split_axis(x.shape(), dim);
    Tensor<T> y(x.shape());
    const T* in = x.data().data();
    T* out = y.data().data();
    for (std::size_t o = 0; o < a.outer; ++o) {
        for (std::size_t i = 0; i < a.inner; ++i) {
            const std::size_t base = o * a.n * a.inner + i;
            T max_v = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < a.n; ++j) max_v = std::max(max_v, in[base + j * a.inner]);
            double sum = 0.0;
            for (std::size_t j = 0; j < a.n; ++j) {
                const double e = std::exp(static_cast<double>(in[base + j * a.inner] - max_v));
                out[base + j * a.inner] = static_cast<T>(e);
                sum += e;
            }
            for (std::size_t j = 0; j < a.n; ++j) {
                out[base + j * a.inner] = static_cast<T>(static_cast<double>(out[base + j * a.inner]) / sum);
            }
        }
    }
    return y;
}

template <typename T>
void softmax_backward(const Tensor<T>& y, std::size_t dim, std::span<const T> grad_out, std::span<T> grad_x) {
    const AxisSplit a = split_axis(y.shape(), dim);
    const T* yv = y.data().data();
    for (std::size_t o = 0; o < a.outer; ++o) {
        for (std::size_t i = 0; i < a.inner; ++i) {
            const std::size_t base = o * a.n * a.inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < a.n; ++j) {
                const std::size_t idx = base + j * a.inner;
                dot += static_cast<double>(grad_out[idx]) * static_cast<double>(yv[idx]);
            }
            for (std::size_t j = 0; j < a.n; ++j) {
                const std::size_t idx = base + j * a.inner;
                grad_x[idx] += static_cast<T>(static_cast<double>(yv[idx]) * (static_cast<double>(grad_out[idx]) - dot));
            }
        }
    }
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
    require_rank(x.shape(), 4, "avg_pool2d");
    if (k == 0 || x.dim(1) % k != 0 || x.dim(2) % k != 0) {
        throw ConfigError("avg_pool2d: spatial size " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                          " is not divisible by kernel " + std::to_string(k));
    }
    const std::size_t l = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t ho = h / k, wo = w / k;
    Tensor<T> out(Shape{l, ho, wo, c});
    const T scale = T{1} / static_cast<T>(k * k);
    for (std::size_t n = 0; n < l; ++n) {
        for (std::size_t i = 0; i < ho; ++i) {
            for (std::size_t j = 0; j < wo; ++j) {
                T* dst = &out.at(n, i, j, 0);
                for (std::size_t di = 0; di < k; ++di) {
                    for (std::size_t dj = 0; dj < k; ++dj) {
                        const T* src = &x.at(n, i * k + di, j * k + dj, 0);
                        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
                }
                for (std::size_t ch = 0; ch < c; ++ch) dst[ch] *= scale;
            }
        }
    }
    return out;
}

template <typename T>
void avg_pool2d_backward(const Shape& x_shape, std::size_t k, std::span<const T> grad_out, std::span<T> grad_x) {
    const std::size_t l = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3];
    const std::size_t ho = h / k, wo = w / k;
    const T scale = T{1} / static_cast<T>(k * k);
    for (std::size_t n = 0; n < l; ++n) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const T* src = grad_out.data() + ((n * ho + i / k) * wo + j / k) * c;
                T* dst = grad_x.data() + ((n * h + i) * w + j) * c;
                for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * scale;
            }
        }
    }
}

// Evaluates an elementwise Eigen expression in aligned, zero-padded chunks. Eigen
// falls back to scalar code for unaligned heads and tails, and its scalar erf/exp
// round differently from the packet versions, so mapping tensors directly made
// results depend on where the allocator placed them.
template <typename F>
void packet_chunks(std::size_t n, F&& body) {
    constexpr std::size_t kChunk = 256;
    using Chunk = Eigen::Map<Eigen::Array<float, kChunk, 1>, Eigen::Aligned64>;
    alignas(64) float a[kChunk];
    alignas(64) float b[kChunk];
    alignas(64) float out[kChunk];
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t len = std::min(kChunk, n - start);
        body(start, len, Chunk(a), Chunk(b), Chunk(out));
    }
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    if constexpr (std::is_same_v<T, float>) {
        const float* xs = x.data().data();
        float* ys = y.data().data();
        packet_chunks(x.size(), [&](std::size_t start, std::size_t len, auto xa, auto, auto out) {
            std::fill(std::copy_n(xs + start, len, xa.data()), xa.data() + xa.size(), 0.0f);
            out = 0.5f * xa * (1.0f + (xa * (1.0f / std::numbers::sqrt2_v<float>)).erf());
            std::copy_n(out.data(), len, ys + start);
        });
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T v = x[i];
            y[i] = v * T{0.5} * std::erfc(-v * std::numbers::sqrt2_v<T> / T{2});
        }
    }
    return y;
}

template <typename T>
void gelu_backward(const Tensor<T>& x, std::span<const T> grad_out, std::span<T> grad_x) {
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    if constexpr (std::is_same_v<T, float>) {
        const float* xs = x.data().data();
        packet_chunks(x.size(), [&](std::size_t start, std::size_t len, auto xa, auto go, auto out) {
            std::fill(std::copy_n(xs + start, len, xa.data()), xa.data() + xa.size(), 0.0f);
            std::fill(std::copy_n(grad_out.data() + start, len, go.data()), go.data() + go.size(), 0.0f);
            out = go * (0.5f * (1.0f + (xa * (1.0f / std::numbers::sqrt2_v<float>)).erf()) +
                        xa * (inv_sqrt_2pi * (-0.5f * xa.square()).exp()));
            for (std::size_t i = 0; i < len; ++i) grad_x[start + i] += out[static_cast<Eigen::Index>(i)];
        });
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T v = x[i];
            const T cdf = T{0.5} * std::erfc(-v * std::numbers::sqrt2_v<T> / T{2});
            const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
            grad_x[i] += grad_out[i] * (cdf + v * pdf);
        }
    }
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    Tensor<T> y(x.shape());
    const T* __restrict xs = x.data().data();
    T* __restrict ys = y.data().data();
    // Plain max/min loops vectorize; both the Eigen array form and a ternary ran ~20x slower on mixed-sign data.
    for (std::size_t i = 0; i < x.size(); ++i) ys[i] = std::max(xs[i], T{0}) + slope * std::min(xs[i], T{0});
    return y;
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& x, T slope, std::span<const T> grad_out, std::span<T> grad_x) {
    const T* __restrict xs = x.data().data();
    const T* __restrict go = grad_out.data();
    T* __restrict gx = grad_x.data();
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += go[i] * (xs[i] >= T{0} ? T{1} : slope);
}

template <typename T>
NormResult<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
    require_rank(x.shape(), 4, "layer_norm");
    require_channels(x.shape(), gain.shape(), "layer_norm", "gain");
    require_channels(x.shape(), bias.shape(), "layer_norm", "bias");
    const std::size_t l = x.dim(0);
    const std::size_t c = x.dim(3);
    const std::size_t group = x.size() / l;
    const std::size_t pixels = group / c;
    NormResult<T> r{Tensor<T>(x.shape()), std::vector<double>(l), std::vector<double>(l)};
    std::vector<double> sum(c), sq(c), mean(c), inv_std(c);
    for (std::size_t n = 0; n < l; ++n) {
        const T* xs = x.data().data() + n * group;
        channel_sums(xs, pixels, c, nullptr, sum.data(), nullptr);
        double total = 0.0;
        for (double s : sum) total += s;
        std::fill(mean.begin(), mean.end(), total / static_cast<double>(group));
        channel_sums(xs, pixels, c, mean.data(), sum.data(), sq.data());
        double sq_total = 0.0;
        for (double s : sq) sq_total += s;
        std::fill(inv_std.begin(), inv_std.end(), 1.0 / std::sqrt(sq_total / static_cast<double>(group) + eps));
        r.mean[n] = mean[0];
        r.inv_std[n] = inv_std[0];
        norm_affine(xs, mean.data(), inv_std.data(), gain, bias, pixels, c, r.y.data().data() + n * group);
    }
    return r;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const NormResult<T>& fwd,
                         std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_gain,
                         std::span<T> grad_bias) {
    const std::size_t l = x.dim(0);
    const std::size_t c = x.dim(3);
    const std::size_t group = x.size() / l;
    std::vector<double> mean(c), inv_std(c);
    for (std::size_t n = 0; n < l; ++n) {
        const std::size_t off = n * group;
        std::fill(mean.begin(), mean.end(), fwd.mean[n]);
        std::fill(inv_std.begin(), inv_std.end(), fwd.inv_std[n]);
        norm_backward_block(x.data().data() + off, grad_out.data() + off,
                            grad_x.empty() ? nullptr : grad_x.data() + off, ptr_or_null(grad_gain),
                            ptr_or_null(grad_bias), gain.data().data(), mean.data(), inv_std.data(), group / c, c,
                            true);
    }
}

template <typename T>
NormResult<T> instance_norm2d(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
    require_rank(x.shape(), 4, "instance_norm2d");
    require_channels(x.shape(), gain.shape(), "instance_norm2d", "gain");
    require_channels(x.shape(), bias.shape(), "instance_norm2d", "bias");
    const std::size_t l = x.dim(0);
    const std::size_t c = x.dim(3);
    const std::size_t hw = x.dim(1) * x.dim(2);
    NormResult<T> r{Tensor<T>(x.shape()), std::vector<double>(l * c), std::vector<double>(l * c)};
    std::vector<double> sum(c), sq(c);
    for (std::size_t n = 0; n < l; ++n) {
        const T* xs = x.data().data() + n * hw * c;
        double* mean = r.mean.data() + n * c;
        double* inv_std = r.inv_std.data() + n * c;
        channel_sums(xs, hw, c, nullptr, sum.data(), nullptr);
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] = sum[ch] / static_cast<double>(hw);
        channel_sums(xs, hw, c, mean, sum.data(), sq.data());
        for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(sq[ch] / static_cast<double>(hw) + eps);
        norm_affine(xs, mean, inv_std, gain, bias, hw, c, r.y.data().data() + n * hw * c);
    }
    return r;
}

template <typename T>
void instance_norm2d_backward(const Tensor<T>& x, const Tensor<T>& gain, const NormResult<T>& fwd,
                              std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_gain,
                              std::span<T> grad_bias) {
    const std::size_t l = x.dim(0);
    const std::size_t c = x.dim(3);
    const std::size_t hw = x.dim(1) * x.dim(2);
    for (std::size_t n = 0; n < l; ++n) {
        const std::size_t off = n * hw * c;
        norm_backward_block(x.data().data() + off, grad_out.data() + off,
                            grad_x.empty() ? nullptr : grad_x.data() + off, ptr_or_null(grad_gain),
                            ptr_or_null(grad_bias), gain.data().data(), fwd.mean.data() + n * c,
                            fwd.inv_std.data() + n * c, hw, c, false);
    }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
    const ConvGeometry g = conv_geometry(x, kernel, stride, padding);
    Tensor<T> out(Shape{g.slices, g.out_h, g.out_w, g.out_c});
    const auto k = as_matrix(kernel.data(), g.patch(), g.out_c);
    const std::size_t in_slice = g.in_h * g.in_w * g.in_c;
    const std::size_t out_slice = g.out_pixels() * g.out_c;
    if (is_pointwise(g)) {
        as_matrix(out.data(), g.slices * g.out_pixels(), g.out_c).noalias() =
            as_matrix(x.data(), g.slices * g.out_pixels(), g.in_c) * k;
        return out;
    }
    std::vector<T> cols(g.out_pixels() * g.patch());
    for (std::size_t n = 0; n < g.slices; ++n) {
        im2col(x.data().data() + n * in_slice, g, cols.data());
        as_matrix(out.data().subspan(n * out_slice, out_slice), g.out_pixels(), g.out_c).noalias() =
            as_matrix(std::span<const T>(cols), g.out_pixels(), g.patch()) * k;
    }
    return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                     std::span<const T> grad_out, std::span<T> grad_x, std::span<T> grad_kernel) {
    const ConvGeometry g = conv_geometry(x, kernel, stride, padding);
    const auto k = as_matrix(kernel.data(), g.patch(), g.out_c);
    const std::size_t in_slice = g.in_h * g.in_w * g.in_c;
    const std::size_t out_slice = g.out_pixels() * g.out_c;
    if (is_pointwise(g)) {
        const std::size_t rows = g.slices * g.out_pixels();
        const auto gy = as_matrix(grad_out, rows, g.out_c);
        if (!grad_kernel.empty()) {
            as_matrix(grad_kernel, g.patch(), g.out_c).noalias() += as_matrix(x.data(), rows, g.in_c).transpose() * gy;
        }
        if (!grad_x.empty()) as_matrix(grad_x, rows, g.in_c).noalias() += gy * k.transpose();
        return;
    }
    std::vector<T> cols(g.out_pixels() * g.patch());
    for (std::size_t n = 0; n < g.slices; ++n) {
        const auto gy = as_matrix(grad_out.subspan(n * out_slice, out_slice), g.out_pixels(), g.out_c);
        if (!grad_kernel.empty()) {
            im2col(x.data().data() + n * in_slice, g, cols.data());
            as_matrix(grad_kernel, g.patch(), g.out_c).noalias() +=
                as_matrix(std::span<const T>(cols), g.out_pixels(), g.patch()).transpose() * gy;
        }
        if (!grad_x.empty()) {
            as_matrix(std::span<T>(cols), g.out_pixels(), g.patch()).noalias() = gy * k.transpose();
            col2im_add(cols.data(), g, grad_x.data() + n * in_slice);
        }
    }
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
    require_rank(x.shape(), 4, "upsample2x");
    const std::size_t l = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Tensor<T> out(Shape{l, 2 * h, 2 * w, c});
    for (std::size_t n = 0; n < l; ++n) {
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) {
                const T* src = &x.at(n, i / 2, j / 2, 0);
                std::copy(src, src + c, &out.at(n, i, j, 0));
            }
        }
    }
    return out;
}

template <typename T>
void upsample2x_backward(const Shape& x_shape, std::span<const T> grad_out, std::span<T> grad_x) {
    const std::size_t l = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3];
    for (std::size_t n = 0; n < l; ++n) {
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) {
                const T* src = grad_out.data() + ((n * 2 * h + i) * 2 * w + j) * c;
                T* dst = grad_x.data() + ((n * h + i / 2) * w + j / 2) * c;
                for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
            }
        }
    }
}

namespace {
template <typename T>
void check_labels(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    const std::size_t classes = logits.shape().back();
    if (labels.size() * classes != logits.size()) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             shape_str(logits.shape()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " at voxel " + std::to_string(i) +
                            " outside [0, " + std::to_string(classes) + ")");
        }
    }
}
} // namespace

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    check_labels(logits, labels);
    const std::size_t classes = logits.shape().back();
    double total = 0.0;
    for (std::size_t v = 0; v < labels.size(); ++v) {
        const T* z = logits.data().data() + v * classes;
        const double max_z = static_cast<double>(*std::max_element(z, z + classes));
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(z[c]) - max_z);
        total += max_z + std::log(sum) - static_cast<double>(z[labels[v]]);
    }
    return static_cast<T>(total / static_cast<double>(labels.size()));
}

template <typename T>
void cross_entropy_backward(const Tensor<T>& logits, std::span<const std::uint8_t> labels, T grad_out,
                            std::span<T> grad_logits) {
    const std::size_t classes = logits.shape().back();
    const double scale = static_cast<double>(grad_out) / static_cast<double>(labels.size());
    for (std::size_t v = 0; v < labels.size(); ++v) {
        const T* z = logits.data().data() + v * classes;
        T* gz = grad_logits.data() + v * classes;
        const double max_z = static_cast<double>(*std::max_element(z, z + classes));
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(z[c]) - max_z);
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(static_cast<double>(z[c]) - max_z) / sum;
            gz[c] += static_cast<T>(scale * (p - (c == labels[v] ? 1.0 : 0.0)));
        }
    }
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) throw UsageError("concat_channels: no inputs");
    Shape out_shape = parts.front()->shape();
    std::size_t total = 0;
    for (const Tensor<T>* p : parts) {
        Shape lead = p->shape();
        lead.back() = out_shape.back();
        if (lead != out_shape) {
            throw DimensionError("concat_channels: " + shape_str(p->shape()) + " incompatible with " +
                                 shape_str(parts.front()->shape()));
        }
        total += p->shape().back();
    }
    out_shape.back() = total;
    Tensor<T> out(out_shape);
    const std::size_t rows = out.size() / total;
    std::size_t offset = 0;
    for (const Tensor<T>* p : parts) {
        const std::size_t c = p->shape().back();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p->data().data() + r * c, c, out.data().data() + r * total + offset);
        }
        offset += c;
    }
    return out;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_channels(x.shape(), bias.shape(), "add_channel_bias", "bias");
    Tensor<T> out = x;
    const std::size_t c = bias.size();
    T* o = out.data().data();
    const T* b = bias.data().data();
    for (std::size_t r = 0; r < out.size(); r += c) {
        for (std::size_t ch = 0; ch < c; ++ch) o[r + ch] += b[ch];
    }
    return out;
}

template <typename T>
Tensor<T> add_slice_encoding(const Tensor<T>& x, const Tensor<T>& enc) {
    require_rank(x.shape(), 4, "add_slice_encoding");
    if (enc.shape() != Shape{x.dim(0), 1, 1, x.dim(3)}) {
        throw DimensionError("add_slice_encoding: encoding " + shape_str(enc.shape()) + " does not broadcast over " +
                             shape_str(x.shape()));
    }
    Tensor<T> out = x;
    const std::size_t c = x.dim(3);
    const std::size_t per_slice = x.size() / x.dim(0);
    T* o = out.data().data();
    for (std::size_t n = 0; n < x.dim(0); ++n) {
        const T* e = enc.data().data() + n * c;
        for (std::size_t r = n * per_slice; r < (n + 1) * per_slice; r += c) {
            for (std::size_t ch = 0; ch < c; ++ch) o[r + ch] += e[ch];
        }
    }
    return out;
}

#define CATNET_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor<T> matmul_4d(const Tensor<T>&, const Tensor<T>&);                                               \
    template void matmul_4d_backward(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::span<T>,          \
                                     std::span<T>);                                                                 \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                                            \
    template void matmul_backward(const Tensor<T>&, const Tensor<T>&, bool, std::span<const T>, std::span<T>,       \
                                  std::span<T>);                                                                    \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                      \
    template void softmax_backward(const Tensor<T>&, std::size_t, std::span<const T>, std::span<T>);                \
    template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                                   \
    template void avg_pool2d_backward(const Shape&, std::size_t, std::span<const T>, std::span<T>);                 \
    template Tensor<T> gelu(const Tensor<T>&);                                                                      \
    template void gelu_backward(const Tensor<T>&, std::span<const T>, std::span<T>);                                \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                             \
    template void leaky_relu_backward(const Tensor<T>&, T, std::span<const T>, std::span<T>);                       \
    template NormResult<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                \
    template void layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const NormResult<T>&, std::span<const T>, \
                                      std::span<T>, std::span<T>, std::span<T>);                                    \
    template NormResult<T> instance_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);           \
    template void instance_norm2d_backward(const Tensor<T>&, const Tensor<T>&, const NormResult<T>&,                \
                                           std::span<const T>, std::span<T>, std::span<T>, std::span<T>);           \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);                        \
    template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, std::span<const T>, \
                                  std::span<T>, std::span<T>);                                                      \
    template Tensor<T> upsample2x(const Tensor<T>&);                                                                \
    template void upsample2x_backward(const Shape&, std::span<const T>, std::span<T>);                              \
    template T cross_entropy(const Tensor<T>&, std::span<const std::uint8_t>);                                      \
    template void cross_entropy_backward(const Tensor<T>&, std::span<const std::uint8_t>, T, std::span<T>);         \
    template Tensor<T> concat_channels(const std::vector<const Tensor<T>*>&);                                       \
    template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> add_slice_encoding(const Tensor<T>&, const Tensor<T>&);

CATNET_INSTANTIATE_OPS(float)
CATNET_INSTANTIATE_OPS(double)

#undef CATNET_INSTANTIATE_OPS

} // namespace catnet::ops
