#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "catnet/errors.hpp"

namespace catnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

/// Dense row-major tensor. Axis order for feature stacks is (l, h, w, c).
///
/// Holds an optional gradient buffer of the same length as the data; it is
/// populated by Tape::backward for tensors bound as parameters.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Element access for a 4D (l, h, w, c) tensor.
    T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t m) { return data_[offset4(i, j, k, m)]; }
    const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t m) const {
        return data_[offset4(i, j, k, m)];
    }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const noexcept { return !grad_.empty(); }
    const std::vector<T>& grad() const noexcept { return grad_; }
    std::vector<T>& mutable_grad() {
        if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
        return grad_;
    }
    void zero_grad() { grad_.assign(data_.size(), T{0}); }
    void clear_grad() { grad_.clear(); }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
    }

    std::size_t offset4(std::size_t i, std::size_t j, std::size_t k, std::size_t m) const {
        return ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + m;
    }

    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
    bool requires_grad_ = false;
};

} // namespace catnet
