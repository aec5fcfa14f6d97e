#include <cstdio>
#include <numeric>
#include <set>

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"

namespace catnet {

namespace {

std::set<std::string> patient_ids(const MetricsReport& r) {
    std::set<std::string> ids;
    for (const auto& p : r.patients) ids.insert(p.id);
    return ids;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

} // namespace

std::string significance_stars(double p) {
    if (p <= 0.01) return "***";
    if (p <= 0.05) return "**";
    if (p <= 0.1) return "*";
    return "";
}

ComparisonRow compare_runs(const MetricsReport& a, const MetricsReport& b, Metric metric, std::uint8_t zone,
                           Part part) {
    if (patient_ids(a) != patient_ids(b)) throw UsageError("reports cover different patient sets");
    const auto va = a.values(metric, zone, part);
    const auto vb = b.values(metric, zone, part);
    ComparisonRow row;
    row.metric = metric_name(metric);
    row.zone = zone_name(zone);
    row.mean_a = mean_of(va);
    row.mean_b = mean_of(vb);
    if (!va.empty() && !vb.empty()) row.test = mann_whitney_u(va, vb);
    row.stars = significance_stars(row.test.p);
    return row;
}

std::vector<ComparisonRow> compare_all(const MetricsReport& a, const MetricsReport& b, Part part) {
    std::vector<ComparisonRow> rows;
    for (std::uint8_t zone : {kTransitionZone, kPeripheralZone}) {
        for (Metric m : {Metric::iou, Metric::dice, Metric::ravd, Metric::assd}) {
            rows.push_back(compare_runs(a, b, m, zone, part));
        }
    }
    return rows;
}

std::string render_comparison(const std::vector<ComparisonRow>& rows) {
    std::string out = "zone  metric        mean_a        mean_b         U         p\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-4s  %-6s  %12.6f  %12.6f  %8.1f  %8.4f %s\n", r.zone.c_str(),
                      r.metric.c_str(), r.mean_a, r.mean_b, r.test.u, r.test.p, r.stars.c_str());
        out += buf;
    }
    return out;
}

} // namespace catnet
