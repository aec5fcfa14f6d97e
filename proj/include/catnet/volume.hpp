#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "catnet/tensor.hpp"

namespace catnet {

enum Zone : std::uint8_t { kBackground = 0, kTransitionZone = 1, kPeripheralZone = 2 };
inline constexpr std::size_t kNumClasses = 3;

/// Voxel spacing in millimetres: row, column (in-plane) and slice (through-plane).
struct Spacing {
    double row = 1.0;
    double col = 1.0;
    double slice = 3.0;

    friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct Volume {
    Tensor<float> intensities;  // l×h×w×1
    Spacing spacing;

    std::size_t slices() const { return intensities.dim(0); }
    std::size_t height() const { return intensities.dim(1); }
    std::size_t width() const { return intensities.dim(2); }
};

/// l×h×w class mask with values in {0, 1, 2}.
struct LabelVolume {
    std::size_t slices = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(std::size_t l, std::size_t h, std::size_t w, std::uint8_t fill = kBackground)
        : slices(l), height(h), width(w), labels(l * h * w, fill) {}

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t slice_size() const noexcept { return height * width; }
    std::size_t index(std::size_t s, std::size_t r, std::size_t c) const { return (s * height + r) * width + c; }
    std::uint8_t& at(std::size_t s, std::size_t r, std::size_t c) { return labels[index(s, r, c)]; }
    std::uint8_t at(std::size_t s, std::size_t r, std::size_t c) const { return labels[index(s, r, c)]; }

    bool same_shape(const LabelVolume& o) const {
        return slices == o.slices && height == o.height && width == o.width;
    }

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

inline std::string shape_str(const LabelVolume& v) {
    return shape_str(Shape{v.slices, v.height, v.width});
}

} // namespace catnet
