#include "catnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "catnet/errors.hpp"

namespace catnet {

namespace {

constexpr std::size_t kOuterSlices = 3;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("phantom spec: " + msg);
}

std::mt19937_64 patient_rng(std::uint64_t seed, std::size_t patient) {
    const auto p = static_cast<std::uint64_t>(patient);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(p >> 32)};
    return std::mt19937_64(seq);
}

// Separable Gaussian blur of a white field, rescaled to unit variance away from the borders.
void smooth_field(std::vector<double>& field, std::size_t h, std::size_t w, double sigma) {
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    double energy = 0.0;
    for (auto& v : k) {
        v /= total;
        energy += v * v;
    }
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    std::vector<double> tmp(field.size());
    for (std::ptrdiff_t r = 0; r < H; ++r) {
        for (std::ptrdiff_t c = 0; c < W; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                const std::ptrdiff_t cc = std::clamp<std::ptrdiff_t>(c + i, 0, W - 1);
                acc += k[static_cast<std::size_t>(i + radius)] * field[static_cast<std::size_t>(r * W + cc)];
            }
            tmp[static_cast<std::size_t>(r * W + c)] = acc;
        }
    }
    for (std::ptrdiff_t r = 0; r < H; ++r) {
        for (std::ptrdiff_t c = 0; c < W; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                const std::ptrdiff_t rr = std::clamp<std::ptrdiff_t>(r + i, 0, H - 1);
                acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(rr * W + c)];
            }
            field[static_cast<std::size_t>(r * W + c)] = acc / energy;
        }
    }
}

bool inside(double r, double c, double cy, double cx, double ry, double rx) {
    if (ry <= 0.0 || rx <= 0.0) return false;
    const double dy = (r - cy) / ry;
    const double dx = (c - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
}

} // namespace

void PhantomSpec::validate() const {
    require(patients >= 1, "patients must be positive");
    require(slices >= 8, "at least 8 slices are required");
    require(height >= 16 && width >= 16, "slices must be at least 16×16");
    require(spacing.row > 0.0 && spacing.col > 0.0, "spacing must be positive");
    require(spacing.slice > spacing.row && spacing.slice > spacing.col,
            "through-plane spacing must exceed in-plane spacing");
    require(noise >= 0.0 && std::isfinite(noise), "noise must be non-negative");
    require(texture >= 0.0 && std::isfinite(texture), "texture must be non-negative");
    require(texture_scale > 0.0 && std::isfinite(texture_scale), "texture scale must be positive");
    require(ambiguity >= 0.0 && ambiguity <= 1.0, "ambiguity must lie in [0, 1]");
    require(gland_slices_min >= 2 * kOuterSlices + 1, "gland must span at least 7 slices");
    require(gland_slices_min <= gland_slices_max, "gland slice range is empty");
    require(gland_slices_max <= slices, "gland cannot span more slices than the volume");
    require(gland_radius_min > 0.0 && gland_radius_min <= gland_radius_max, "invalid gland radius range");
    const double reach = gland_radius_max + center_jitter + center_drift;
    require(reach < 0.5 * static_cast<double>(std::min(height, width)), "gland does not fit inside the slice");
    require(tz_ratio_min > 0.0 && tz_ratio_min <= tz_ratio_max && tz_ratio_max < 0.8, "invalid TZ ratio range");
    require(contrast_gain_min > 0.0 && contrast_gain_min <= contrast_gain_max, "invalid contrast gain range");
    for (double m : {background_mean, tz_mean, pz_mean}) require(m >= 0.0 && m <= 1.0, "zone means must lie in [0, 1]");
}

Phantom generate_phantom(const PhantomSpec& spec, std::size_t patient) {
    spec.validate();
    auto rng = patient_rng(spec.seed, patient);
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

    const std::size_t l = spec.slices, h = spec.height, w = spec.width;
    const std::size_t span_max = std::min(spec.gland_slices_max, l >= 2 ? l - 2 : l);
    const std::size_t span_min = std::min(spec.gland_slices_min, span_max);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(span_min, span_max)(rng);
    const std::size_t first = l - n >= 2 ? std::uniform_int_distribution<std::size_t>(1, l - n - 1)(rng) : 0;

    const double radius = uniform(spec.gland_radius_min, spec.gland_radius_max);
    const double aspect = uniform(0.7, 0.85);
    const double jitter_x = uniform(-spec.center_jitter, spec.center_jitter);
    const double jitter_y = uniform(-spec.center_jitter, spec.center_jitter);
    const double drift_x = uniform(-spec.center_drift, spec.center_drift);
    const double drift_y = uniform(-spec.center_drift, spec.center_drift);
    const double tz_ratio = uniform(spec.tz_ratio_min, spec.tz_ratio_max);
    const double gain = uniform(spec.contrast_gain_min, spec.contrast_gain_max);

    Phantom out;
    out.first_slice = first;
    out.last_slice = first + n - 1;
    out.labels = LabelVolume(l, h, w);
    out.gland = LabelVolume(l, h, w);
    Tensor<float> img(Shape{l, h, w, 1});

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> noise(h * w), smooth(h * w), texture(h * w, 0.0);

    for (std::size_t s = 0; s < l; ++s) {
        const bool in_gland = s >= first && s <= out.last_slice;
        double attenuation = 1.0;
        double cx = 0, cy = 0, rx = 0, ry = 0, tx = 0, ty = 0, tcy = 0, posterior = 0;
        if (in_gland) {
            const std::size_t k = s - first;
            if (k < kOuterSlices || k >= n - kOuterSlices) attenuation = 1.0 - spec.ambiguity;
            const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
            const double u = 2.0 * t - 1.0;
            const double taper = 0.55 + 0.45 * std::sqrt(std::max(0.0, 1.0 - u * u));
            cx = 0.5 * static_cast<double>(w) + jitter_x + drift_x * u;
            cy = 0.5 * static_cast<double>(h) + jitter_y + drift_y * u;
            rx = radius * taper;
            ry = radius * aspect * taper;
            // TZ is absent at the apex and reaches full size toward the base.
            const double growth = std::clamp((t - 0.1) / 0.6, 0.0, 1.0);
            tx = tz_ratio * growth * rx;
            ty = tz_ratio * growth * ry;
            tcy = cy - 0.2 * ry;
            posterior = cy - 0.3 * ry;
        }
        const double tz_level = spec.background_mean + gain * (spec.tz_mean - spec.background_mean) * attenuation;
        const double pz_level = spec.background_mean + gain * (spec.pz_mean - spec.background_mean) * attenuation;

        for (auto& v : noise) v = spec.noise * gauss(rng);
        if (spec.texture > 0.0) {
            for (auto& v : texture) v = gauss(rng);
            smooth_field(texture, h, w, spec.texture_scale);
            for (auto& v : texture) v *= spec.texture;
        }
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                double acc = 0.0;
                int count = 0;
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
                        const auto cc = static_cast<std::ptrdiff_t>(c) + dc;
                        if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) ||
                            cc >= static_cast<std::ptrdiff_t>(w)) {
                            continue;
                        }
                        acc += noise[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
                        ++count;
                    }
                }
                smooth[r * w + c] = acc / count;
            }
        }

        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double rr = static_cast<double>(r), cc = static_cast<double>(c);
                std::uint8_t zone = kBackground;
                double level = spec.background_mean;
                if (in_gland && inside(rr, cc, cy, cx, ry, rx)) {
                    out.gland.at(s, r, c) = 1;
                    if (inside(rr, cc, tcy, cx, ty, tx)) {
                        zone = kTransitionZone;
                        level = tz_level;
                    } else if (rr >= posterior) {
                        zone = kPeripheralZone;
                        level = pz_level;
                    }
                }
                out.labels.at(s, r, c) = zone;
                img[(s * h + r) * w + c] = static_cast<float>(std::clamp(level + smooth[r * w + c] + texture[r * w + c], 0.0, 1.0));
            }
        }
    }
    out.volume.intensities = std::move(img);
    out.volume.spacing = spec.spacing;
    return out;
}

} // namespace catnet
