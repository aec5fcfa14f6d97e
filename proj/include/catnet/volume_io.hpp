#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "catnet/volume.hpp"

namespace catnet {

// CATV file: "CATV" | version u16 | dtype u8 | ndim u8 | dims u32 × ndim | payload.
// All integers and floats little-endian, payload row-major.
inline constexpr std::uint16_t kVolumeFormatVersion = 1;

enum class VolumeDtype : std::uint8_t { f32 = 0, u8 = 1 };

struct VolumeFile {
    VolumeDtype dtype = VolumeDtype::f32;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;  // little-endian element bytes
};

std::vector<std::uint8_t> encode_volume_file(const VolumeFile& file);
/// Throws FormatError with the offending byte offset. Never returns a partial value.
VolumeFile decode_volume_file(const std::vector<std::uint8_t>& bytes);

/// Intensities are stored as f32 with dims l×h×w×1. Spacing lives in the dataset manifest.
void save_volume(const std::filesystem::path& path, const Volume& volume);
void save_volume(const std::filesystem::path& path, const LabelVolume& labels);

/// Throws FormatError on malformed content or a dtype/rank mismatch, DataError on I/O failure
/// or label values outside {0, 1, 2}.
Volume load_volume(const std::filesystem::path& path, Spacing spacing = {});
LabelVolume load_labels(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

} // namespace catnet
