#pragma once

#include <cstdint>
#include <utility>

#include "catnet/volume.hpp"

namespace catnet {

/// Parameters of the synthetic anisotropic prostate-like phantom.
///
/// Every patient has a tapered gland ellipse per slice, an anterior inner
/// transition zone that grows from apex to base, and a posterior peripheral
/// band. The three outermost gland slices at each end have their zone contrast
/// scaled by (1 − ambiguity), and every patient draws its own contrast gain,
/// so single-slice intensities there do not determine the zone. A smooth
/// texture field, drawn independently per slice, adds blob-like structure that
/// local averaging within a slice cannot remove.
struct PhantomSpec {
    std::uint64_t seed = 7;
    std::size_t patients = 80;
    std::size_t slices = 12;
    std::size_t height = 64;
    std::size_t width = 64;
    Spacing spacing{1.0, 1.0, 3.0};
    double noise = 0.1;          // white noise sigma before 3×3 smoothing
    double texture = 0.4;        // std of the per-slice smooth texture field
    double texture_scale = 4.0;  // px, Gaussian correlation length of the texture
    double ambiguity = 0.5;

    double center_jitter = 4.0;          // px, per patient
    double center_drift = 3.0;           // px, smooth drift across the gland
    double gland_radius_min = 16.0;      // px, largest semi-axis range
    double gland_radius_max = 22.0;
    double tz_ratio_min = 0.45;          // TZ semi-axes relative to the gland
    double tz_ratio_max = 0.65;
    double contrast_gain_min = 0.7;      // per-patient contrast scaling
    double contrast_gain_max = 1.3;
    std::size_t gland_slices_min = 8;
    std::size_t gland_slices_max = 10;

    double background_mean = 0.25;
    double tz_mean = 0.5;
    double pz_mean = 0.75;

    /// Throws ConfigError on invalid combinations.
    void validate() const;
};

struct Phantom {
    Volume volume;
    LabelVolume labels;
    LabelVolume gland;  // 1 inside the gland envelope
    std::size_t first_slice = 0;
    std::size_t last_slice = 0;
};

/// Deterministic in (spec, patient).
Phantom generate_phantom(const PhantomSpec& spec, std::size_t patient);

} // namespace catnet
