#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "catnet/phantom.hpp"
#include "catnet/volume.hpp"

namespace catnet {

struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Shuffles ids 0..patients-1 with the seed and cuts them by ratio. Sizes are
/// floor(n·r) with the remainder handed out by largest fractional part, ties to
/// the earlier split. Throws ConfigError when the ratios do not sum to 1 or a
/// split would be empty.
DatasetSplit split_dataset(std::size_t patients, std::array<double, 3> ratios, std::uint64_t seed);

struct ManifestEntry {
    std::string id;
    std::size_t index = 0;
    std::filesystem::path image;   // absolute after load_manifest
    std::filesystem::path labels;
    Spacing spacing;
    std::string split;             // "train", "val" or "test"
};

struct Manifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> patients;

    std::vector<const ManifestEntry*> split(const std::string& name) const;
};

struct DatasetOptions {
    PhantomSpec phantom;
    std::array<double, 3> ratios{0.75, 0.125, 0.125};
    std::uint64_t split_seed = 7;
};

/// Writes pNNN_image.catv / pNNN_labels.catv per patient plus manifest.json.
/// Output bytes depend only on the options.
Manifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& dir);

/// Throws DataError for unreadable or malformed manifests.
Manifest load_manifest(const std::filesystem::path& path);

std::string patient_id(std::size_t index);

} // namespace catnet
