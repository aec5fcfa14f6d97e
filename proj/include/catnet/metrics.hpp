#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "catnet/volume.hpp"

namespace catnet {

/// |P∩G| / |P∪G| for one class over the whole volume; 1 when both are empty.
double iou(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls);
/// 2|P∩G| / (|P| + |G|); 1 when both are empty.
double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls);
/// 100·||P| − |G|| / |G| in percent; empty when G is empty.
std::optional<double> ravd(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls);
/// Mean nearest-surface distance in mm over both surfaces; empty when either mask is empty.
/// Surface voxels are foreground voxels with a six-connected background (or out-of-volume) neighbour.
std::optional<double> assd(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls, const Spacing& spacing);

/// Binary surface mask of one class (six-connectivity, outside counts as background).
std::vector<std::uint8_t> surface_voxels(const LabelVolume& v, std::uint8_t cls);

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest set voxel of
/// `sites` under anisotropic spacing. Infinity everywhere when no site is set.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, std::size_t slices,
                                               std::size_t height, std::size_t width, const Spacing& spacing);

enum class Part : std::uint8_t { whole = 0, apex = 1, mid = 2, base = 3 };
inline constexpr std::array<Part, 4> kParts{Part::whole, Part::apex, Part::mid, Part::base};
const char* part_name(Part p);

struct PartSplit {
    std::vector<std::size_t> apex;
    std::vector<std::size_t> mid;
    std::vector<std::size_t> base;
};

/// First three prostate-bearing slices are apex, last three base, the rest mid.
/// Empty when fewer than 7 slices contain TZ or PZ.
std::optional<PartSplit> part_split(const LabelVolume& gt);

/// Copy of slices [first, last].
LabelVolume crop_slices(const LabelVolume& v, std::size_t first, std::size_t last);

struct ZoneMetrics {
    double iou = 0.0;
    double dice = 0.0;
    std::optional<double> ravd;
    std::optional<double> assd;
};

struct PatientMetrics {
    std::string id;
    // [zone index 0 = TZ, 1 = PZ][part]; parts are absent when the split is undefined.
    std::array<std::array<std::optional<ZoneMetrics>, 4>, 2> zones;
};

PatientMetrics evaluate_patient(const std::string& id, const LabelVolume& pred, const LabelVolume& gt,
                                const Spacing& spacing);

struct Aggregate {
    double mean = 0.0;
    double std = 0.0;   // population standard deviation
    std::size_t count = 0;
    std::size_t undefined = 0;
};

enum class Metric : std::uint8_t { iou, dice, ravd, assd };
const char* metric_name(Metric m);
Metric parse_metric(const std::string& name);
/// Zone names are "TZ" and "PZ".
std::uint8_t parse_zone(const std::string& name);
const char* zone_name(std::uint8_t cls);

struct MetricsReport {
    std::vector<PatientMetrics> patients;

    /// Per-patient values for one metric; undefined entries are skipped.
    std::vector<double> values(Metric m, std::uint8_t cls, Part part = Part::whole) const;
    Aggregate aggregate(Metric m, std::uint8_t cls, Part part = Part::whole) const;
};

std::string report_to_json(const MetricsReport& report, int indent = 2);
MetricsReport report_from_json(const std::string& text);

enum class UTestMethod : std::uint8_t { automatic, exact, normal };

struct UTestResult {
    double u = 0.0;   // statistic for the first sample
    double z = 0.0;   // normal score (0 for the exact method)
    double p = 1.0;   // two-sided
    bool exact = false;
};

/// Rank-sum test with midranks. automatic picks exact enumeration when n·m ≤ 64.
UTestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b,
                           UTestMethod method = UTestMethod::automatic);

} // namespace catnet
