#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "catnet/tensor.hpp"

namespace catnet {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    std::size_t id() const noexcept { return id_; }
    Tape<T>* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// View handed to an op's backward closure.
template <typename T>
class BackwardContext {
public:
    BackwardContext(Tape<T>& tape, std::size_t node) : tape_(tape), node_(node) {}

    const Tensor<T>& input(std::size_t i) const;
    const Tensor<T>& output() const;
    std::span<const T> grad_output() const;
    bool needs_grad(std::size_t i) const;
    /// Zero-initialized on first access; empty when input i does not require grad.
    std::span<T> grad_input(std::size_t i);

private:
    Tape<T>& tape_;
    std::size_t node_;
};

/// Wengert list for reverse-mode differentiation. Confined to one thread.
///
/// Every differentiable op appends one node holding its output and a closure
/// computing vector-Jacobian products. backward() walks the nodes in exact
/// reverse order of recording.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(BackwardContext<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// With gradients disabled, ops keep values only (inference mode).
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var<T> constant(Tensor<T> value);
    /// Leaf whose gradient can be read back with grad().
    Var<T> leaf(Tensor<T> value);
    /// Leaf bound to an external parameter; backward accumulates into param.mutable_grad().
    /// The parameter must outlive the tape and stay unmodified until backward completes.
    Var<T> parameter(Tensor<T>& param);

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward, std::string_view op);

    const Tensor<T>& value(const Var<T>& v) const;
    bool requires_grad(const Var<T>& v) const;
    /// Gradient accumulated for v by the last backward(); empty if none reached it.
    std::span<const T> grad(const Var<T>& v) const;

    /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be a single-element tensor.
    void backward(const Var<T>& loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
    /// Node ids whose backward closures ran in the last backward(), in visit order.
    const std::vector<std::size_t>& last_backward_order() const noexcept { return visit_order_; }

private:
    friend class BackwardContext<T>;

    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Tensor<T>* bound = nullptr;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        std::vector<T> grad;
        bool requires_grad = false;
        std::string_view op;

        const Tensor<T>& get() const { return external ? *external : value; }
    };

    void check_owner(const Var<T>& v) const;

    std::deque<Node> nodes_;  // deque keeps value() references stable while recording
    std::vector<std::size_t> visit_order_;
    bool grad_enabled_ = true;
};

// Differentiable ops. Arguments must live on the same tape.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias);
template <typename T>
Var<T> add_slice_encoding(const Var<T>& x, const Var<T>& encoding);
template <typename T>
Var<T> matmul_4d(const Var<T>& b, const Var<T>& w);
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false);
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t dim);
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k);
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps);
template <typename T>
Var<T> instance_norm2d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding);
template <typename T>
Var<T> upsample2x(const Var<T>& x);
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<std::uint8_t> labels);

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}

inline constexpr double kNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

} // namespace catnet
