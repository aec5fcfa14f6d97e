#include "catnet/autodiff.hpp"

#include <cassert>
#include <memory>
#include <string>

#include "catnet/ops.hpp"

namespace catnet {

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad(*this);
}

template <typename T>
const Tensor<T>& BackwardContext<T>::input(std::size_t i) const {
    return tape_.nodes_[tape_.nodes_[node_].inputs[i]].get();
}

template <typename T>
const Tensor<T>& BackwardContext<T>::output() const {
    return tape_.nodes_[node_].get();
}

template <typename T>
std::span<const T> BackwardContext<T>::grad_output() const {
    return tape_.nodes_[node_].grad;
}

template <typename T>
bool BackwardContext<T>::needs_grad(std::size_t i) const {
    return tape_.nodes_[tape_.nodes_[node_].inputs[i]].requires_grad;
}

template <typename T>
std::span<T> BackwardContext<T>::grad_input(std::size_t i) {
    auto& in = tape_.nodes_[tape_.nodes_[node_].inputs[i]];
    if (!in.requires_grad) return {};
    if (in.grad.empty()) in.grad.assign(in.get().size(), T{0});
    return in.grad;
}

template <typename T>
void Tape<T>::check_owner(const Var<T>& v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) throw UsageError("variable does not belong to this tape");
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.op = "constant";
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T>& param) {
    Node n;
    n.external = &param;
    n.requires_grad = grad_enabled_;
    n.bound = grad_enabled_ ? &param : nullptr;
    n.op = "parameter";
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward, std::string_view op) {
#ifndef NDEBUG
    bool inputs_finite = true;
    for (const auto& in : inputs) inputs_finite = inputs_finite && this->value(in).all_finite();
    assert(!inputs_finite || value.all_finite());
#endif
    Node n;
    n.value = std::move(value);
    n.op = op;
    bool any = false;
    for (const auto& in : inputs) {
        check_owner(in);
        n.inputs.push_back(in.id_);
        any = any || nodes_[in.id_].requires_grad;
    }
    n.requires_grad = grad_enabled_ && any;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id_].get();
}

template <typename T>
bool Tape<T>::requires_grad(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id_].requires_grad;
}

template <typename T>
std::span<const T> Tape<T>::grad(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id_].grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    check_owner(loss);
    Node& root = nodes_[loss.id_];
    if (root.get().size() != 1) {
        throw UsageError("backward: loss must be a scalar, got shape " + shape_str(root.get().shape()));
    }
    visit_order_.clear();
    if (!root.requires_grad) return;
    root.grad.assign(1, T{1});
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) {
            visit_order_.push_back(id);
            BackwardContext<T> ctx(*this, id);
            n.backward(ctx);
        }
        if (n.bound) {
            auto& dst = n.bound->mutable_grad();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
        }
    }
}

namespace {

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
    if (!v.valid()) throw UsageError("operation on an unbound variable");
    return *v.tape();
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " differ");
    }
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [](BackwardContext<T>& ctx) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (auto g = ctx.grad_input(k); !g.empty()) accumulate(g, ctx.grad_output());
        }
    }, "add");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return tape_of(a).record(std::move(out), {a, b}, [](BackwardContext<T>& ctx) {
        const auto gy = ctx.grad_output();
        if (auto g = ctx.grad_input(0); !g.empty()) {
            const auto b = ctx.input(1).data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * b[i];
        }
        if (auto g = ctx.grad_input(1); !g.empty()) {
            const auto a = ctx.input(0).data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * a[i];
        }
    }, "mul");
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v *= factor;
    return tape_of(x).record(std::move(out), {x}, [factor](BackwardContext<T>& ctx) {
        auto g = ctx.grad_input(0);
        const auto gy = ctx.grad_output();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * gy[i];
    }, "scale");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    double s = 0.0;
    for (T v : x.value().data()) s += static_cast<double>(v);
    return tape_of(x).record(Tensor<T>::scalar(static_cast<T>(s)), {x}, [](BackwardContext<T>& ctx) {
        auto g = ctx.grad_input(0);
        const T gy = ctx.grad_output()[0];
        for (auto& v : g) v += gy;
    }, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.value().size())));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    return tape_of(x).record(x.value().reshaped(std::move(shape)), {x}, [](BackwardContext<T>& ctx) {
        accumulate(ctx.grad_input(0), ctx.grad_output());
    }, "reshape");
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    return tape_of(x).record(ops::add_channel_bias(x.value(), bias.value()), {x, bias}, [](BackwardContext<T>& ctx) {
        const auto gy = ctx.grad_output();
        if (auto g = ctx.grad_input(0); !g.empty()) accumulate(g, gy);
        if (auto g = ctx.grad_input(1); !g.empty()) {
            const std::size_t c = g.size();
            for (std::size_t r = 0; r < gy.size(); r += c) {
                for (std::size_t ch = 0; ch < c; ++ch) g[ch] += gy[r + ch];
            }
        }
    }, "add_channel_bias");
}

template <typename T>
Var<T> add_slice_encoding(const Var<T>& x, const Var<T>& encoding) {
    return tape_of(x).record(ops::add_slice_encoding(x.value(), encoding.value()), {x, encoding},
                             [](BackwardContext<T>& ctx) {
        const auto gy = ctx.grad_output();
        if (auto g = ctx.grad_input(0); !g.empty()) accumulate(g, gy);
        if (auto g = ctx.grad_input(1); !g.empty()) {
            const Shape& s = ctx.input(0).shape();
            const std::size_t c = s[3];
            const std::size_t per_slice = gy.size() / s[0];
            for (std::size_t n = 0; n < s[0]; ++n) {
                for (std::size_t r = n * per_slice; r < (n + 1) * per_slice; r += c) {
                    for (std::size_t ch = 0; ch < c; ++ch) g[n * c + ch] += gy[r + ch];
                }
            }
        }
    }, "add_slice_encoding");
}

template <typename T>
Var<T> matmul_4d(const Var<T>& b, const Var<T>& w) {
    return tape_of(b).record(ops::matmul_4d(b.value(), w.value()), {b, w}, [](BackwardContext<T>& ctx) {
        ops::matmul_4d_backward(ctx.input(0), ctx.input(1), ctx.grad_output(), ctx.grad_input(0), ctx.grad_input(1));
    }, "matmul_4d");
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b) {
    return tape_of(a).record(ops::matmul(a.value(), b.value(), transpose_b), {a, b},
                             [transpose_b](BackwardContext<T>& ctx) {
        ops::matmul_backward(ctx.input(0), ctx.input(1), transpose_b, ctx.grad_output(), ctx.grad_input(0),
                             ctx.grad_input(1));
    }, "matmul");
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t dim) {
    return tape_of(x).record(ops::softmax(x.value(), dim), {x}, [dim](BackwardContext<T>& ctx) {
        ops::softmax_backward(ctx.output(), dim, ctx.grad_output(), ctx.grad_input(0));
    }, "softmax");
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k) {
    return tape_of(x).record(ops::avg_pool2d(x.value(), k), {x}, [k](BackwardContext<T>& ctx) {
        ops::avg_pool2d_backward(ctx.input(0).shape(), k, ctx.grad_output(), ctx.grad_input(0));
    }, "avg_pool2d");
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    return tape_of(x).record(ops::gelu(x.value()), {x}, [](BackwardContext<T>& ctx) {
        ops::gelu_backward(ctx.input(0), ctx.grad_output(), ctx.grad_input(0));
    }, "gelu");
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    return tape_of(x).record(ops::leaky_relu(x.value(), slope), {x}, [slope](BackwardContext<T>& ctx) {
        ops::leaky_relu_backward(ctx.input(0), slope, ctx.grad_output(), ctx.grad_input(0));
    }, "leaky_relu");
}

namespace {

template <typename T, typename Forward, typename Backward>
Var<T> record_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps, Forward forward,
                   Backward backward, std::string_view name) {
    ops::NormResult<T> r = forward(x.value(), gain.value(), bias.value(), eps);
    Tensor<T> y = std::move(r.y);
    auto stats = std::make_shared<ops::NormResult<T>>(std::move(r));
    return tape_of(x).record(std::move(y), {x, gain, bias}, [stats, backward](BackwardContext<T>& ctx) {
        backward(ctx.input(0), ctx.input(1), *stats, ctx.grad_output(), ctx.grad_input(0), ctx.grad_input(1),
                 ctx.grad_input(2));
    }, name);
}

} // namespace

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
    return record_norm(x, gain, bias, eps, ops::layer_norm<T>, ops::layer_norm_backward<T>, "layer_norm");
}

template <typename T>
Var<T> instance_norm2d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
    return record_norm(x, gain, bias, eps, ops::instance_norm2d<T>, ops::instance_norm2d_backward<T>,
                       "instance_norm2d");
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
    return tape_of(x).record(ops::conv2d(x.value(), kernel.value(), stride, padding), {x, kernel},
                             [stride, padding](BackwardContext<T>& ctx) {
        ops::conv2d_backward(ctx.input(0), ctx.input(1), stride, padding, ctx.grad_output(), ctx.grad_input(0),
                             ctx.grad_input(1));
    }, "conv2d");
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    return tape_of(x).record(ops::upsample2x(x.value()), {x}, [](BackwardContext<T>& ctx) {
        ops::upsample2x_backward(ctx.input(0).shape(), ctx.grad_output(), ctx.grad_input(0));
    }, "upsample2x");
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw UsageError("concat_channels: no inputs");
    std::vector<const Tensor<T>*> values;
    for (const auto& p : parts) values.push_back(&p.value());
    return tape_of(parts.front()).record(ops::concat_channels(values), parts, [n = parts.size()](BackwardContext<T>& ctx) {
        const auto gy = ctx.grad_output();
        const std::size_t total = ctx.output().shape().back();
        const std::size_t rows = gy.size() / total;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t c = ctx.input(k).shape().back();
            if (auto g = ctx.grad_input(k); !g.empty()) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t ch = 0; ch < c; ++ch) g[r * c + ch] += gy[r * total + offset + ch];
                }
            }
            offset += c;
        }
    }, "concat_channels");
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<std::uint8_t> labels) {
    const T loss = ops::cross_entropy(logits.value(), std::span<const std::uint8_t>(labels));
    auto saved = std::make_shared<std::vector<std::uint8_t>>(std::move(labels));
    return tape_of(logits).record(Tensor<T>::scalar(loss), {logits}, [saved](BackwardContext<T>& ctx) {
        ops::cross_entropy_backward(ctx.input(0), std::span<const std::uint8_t>(*saved), ctx.grad_output()[0],
                                    ctx.grad_input(0));
    }, "cross_entropy");
}

#define CATNET_INSTANTIATE_AD(T)                                                                    \
    template class Var<T>;                                                                          \
    template class BackwardContext<T>;                                                              \
    template class Tape<T>;                                                                         \
    template Var<T> add(const Var<T>&, const Var<T>&);                                              \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
    template Var<T> scale(const Var<T>&, T);                                                        \
    template Var<T> sum(const Var<T>&);                                                             \
    template Var<T> mean(const Var<T>&);                                                            \
    template Var<T> reshape(const Var<T>&, Shape);                                                  \
    template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                                 \
    template Var<T> add_slice_encoding(const Var<T>&, const Var<T>&);                               \
    template Var<T> matmul_4d(const Var<T>&, const Var<T>&);                                        \
    template Var<T> matmul(const Var<T>&, const Var<T>&, bool);                                     \
    template Var<T> softmax(const Var<T>&, std::size_t);                                            \
    template Var<T> avg_pool2d(const Var<T>&, std::size_t);                                         \
    template Var<T> gelu(const Var<T>&);                                                            \
    template Var<T> leaky_relu(const Var<T>&, T);                                                   \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                \
    template Var<T> instance_norm2d(const Var<T>&, const Var<T>&, const Var<T>&, double);           \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, std::size_t, std::size_t);                 \
    template Var<T> upsample2x(const Var<T>&);                                                      \
    template Var<T> concat_channels(const std::vector<Var<T>>&);                                    \
    template Var<T> cross_entropy(const Var<T>&, std::vector<std::uint8_t>);

CATNET_INSTANTIATE_AD(float)
CATNET_INSTANTIATE_AD(double)

#undef CATNET_INSTANTIATE_AD

} // namespace catnet
