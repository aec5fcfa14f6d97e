#include "catnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "catnet/errors.hpp"

namespace catnet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const LabelVolume& a, const LabelVolume& b, const char* what) {
    if (!a.same_shape(b)) {
        throw UsageError(std::string(what) + ": masks differ in shape, " + shape_str(a) + " vs " + shape_str(b));
    }
}

struct Counts {
    std::size_t pred = 0, gt = 0, both = 0;
};

Counts count(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls, const char* what) {
    require_same_shape(pred, gt, what);
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.labels[i] == cls;
        const bool g = gt.labels[i] == cls;
        c.pred += p;
        c.gt += g;
        c.both += p && g;
    }
    return c;
}

// Lower envelope of parabolas along one line: out[q] = min_p f[p] + ((q − p)·step)².
void distance_1d(const double* f, double* out, std::size_t n, std::size_t stride, double step,
                 std::vector<std::size_t>& v, std::vector<double>& z) {
    const double s2 = step * step;
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        const double fq = f[q * stride];
        if (fq == kInf) continue;
        if (!any) {
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            any = true;
            continue;
        }
        // z[0] = −∞ bounds the pop loop.
        double s = 0.0;
        while (true) {
            const std::size_t p = v[k];
            const double fp = f[p * stride];
            const double dq = static_cast<double>(q), dp = static_cast<double>(p);
            s = ((fq + s2 * dq * dq) - (fp + s2 * dp * dp)) / (2.0 * s2 * (dq - dp));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (!any) {
        for (std::size_t q = 0; q < n; ++q) out[q * stride] = kInf;
        return;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double d = (static_cast<double>(q) - static_cast<double>(v[k])) * step;
        out[q * stride] = f[v[k] * stride] + d * d;
    }
}

} // namespace

double iou(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls) {
    const Counts c = count(pred, gt, cls, "iou");
    const std::size_t uni = c.pred + c.gt - c.both;
    return uni == 0 ? 1.0 : static_cast<double>(c.both) / static_cast<double>(uni);
}

double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls) {
    const Counts c = count(pred, gt, cls, "dice");
    const std::size_t denom = c.pred + c.gt;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.both) / static_cast<double>(denom);
}

std::optional<double> ravd(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls) {
    const Counts c = count(pred, gt, cls, "ravd");
    if (c.gt == 0) return std::nullopt;
    const double diff = std::abs(static_cast<double>(c.pred) - static_cast<double>(c.gt));
    return 100.0 * diff / static_cast<double>(c.gt);
}

std::vector<std::uint8_t> surface_voxels(const LabelVolume& v, std::uint8_t cls) {
    std::vector<std::uint8_t> out(v.size(), 0);
    const auto fg = [&](std::ptrdiff_t s, std::ptrdiff_t r, std::ptrdiff_t c) {
        if (s < 0 || r < 0 || c < 0 || s >= static_cast<std::ptrdiff_t>(v.slices) ||
            r >= static_cast<std::ptrdiff_t>(v.height) || c >= static_cast<std::ptrdiff_t>(v.width)) {
            return false;
        }
        return v.at(static_cast<std::size_t>(s), static_cast<std::size_t>(r), static_cast<std::size_t>(c)) == cls;
    };
    for (std::size_t s = 0; s < v.slices; ++s) {
        for (std::size_t r = 0; r < v.height; ++r) {
            for (std::size_t c = 0; c < v.width; ++c) {
                if (v.at(s, r, c) != cls) continue;
                const auto S = static_cast<std::ptrdiff_t>(s), R = static_cast<std::ptrdiff_t>(r),
                           C = static_cast<std::ptrdiff_t>(c);
                const bool interior = fg(S - 1, R, C) && fg(S + 1, R, C) && fg(S, R - 1, C) && fg(S, R + 1, C) &&
                                      fg(S, R, C - 1) && fg(S, R, C + 1);
                out[v.index(s, r, c)] = interior ? 0 : 1;
            }
        }
    }
    return out;
}

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, std::size_t slices,
                                               std::size_t height, std::size_t width, const Spacing& spacing) {
    const std::size_t n = slices * height * width;
    if (sites.size() != n) throw DimensionError("distance transform: site mask has the wrong length");
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = sites[i] ? 0.0 : kInf;
    const std::size_t longest = std::max({slices, height, width});
    std::vector<std::size_t> v(longest);
    std::vector<double> z(longest + 1);

    for (std::size_t s = 0; s < slices; ++s) {  // along columns
        for (std::size_t r = 0; r < height; ++r) {
            const std::size_t off = (s * height + r) * width;
            distance_1d(a.data() + off, b.data() + off, width, 1, spacing.col, v, z);
        }
    }
    for (std::size_t s = 0; s < slices; ++s) {  // along rows
        for (std::size_t c = 0; c < width; ++c) {
            const std::size_t off = s * height * width + c;
            distance_1d(b.data() + off, a.data() + off, height, width, spacing.row, v, z);
        }
    }
    for (std::size_t r = 0; r < height; ++r) {  // across slices
        for (std::size_t c = 0; c < width; ++c) {
            const std::size_t off = r * width + c;
            distance_1d(a.data() + off, b.data() + off, slices, height * width, spacing.slice, v, z);
        }
    }
    return b;
}

std::optional<double> assd(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t cls, const Spacing& spacing) {
    require_same_shape(pred, gt, "assd");
    const auto sp = surface_voxels(pred, cls);
    const auto sg = surface_voxels(gt, cls);
    const bool p_any = std::find(sp.begin(), sp.end(), 1) != sp.end();
    const bool g_any = std::find(sg.begin(), sg.end(), 1) != sg.end();
    if (!p_any || !g_any) return std::nullopt;
    const auto dp = squared_distance_transform(sp, pred.slices, pred.height, pred.width, spacing);
    const auto dg = squared_distance_transform(sg, gt.slices, gt.height, gt.width, spacing);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < sp.size(); ++i) {
        if (sp[i]) total += std::sqrt(dg[i]), ++n;
        if (sg[i]) total += std::sqrt(dp[i]), ++n;
    }
    return total / static_cast<double>(n);
}

const char* part_name(Part p) {
    switch (p) {
    case Part::whole: return "whole";
    case Part::apex: return "apex";
    case Part::mid: return "mid";
    case Part::base: return "base";
    }
    return "?";
}

std::optional<PartSplit> part_split(const LabelVolume& gt) {
    std::vector<std::size_t> bearing;
    for (std::size_t s = 0; s < gt.slices; ++s) {
        const auto first = gt.labels.begin() + static_cast<std::ptrdiff_t>(s * gt.slice_size());
        const auto last = first + static_cast<std::ptrdiff_t>(gt.slice_size());
        if (std::any_of(first, last, [](std::uint8_t v) { return v != kBackground; })) bearing.push_back(s);
    }
    if (bearing.size() < 7) return std::nullopt;
    PartSplit out;
    out.apex.assign(bearing.begin(), bearing.begin() + 3);
    out.mid.assign(bearing.begin() + 3, bearing.end() - 3);
    out.base.assign(bearing.end() - 3, bearing.end());
    return out;
}

LabelVolume crop_slices(const LabelVolume& v, std::size_t first, std::size_t last) {
    if (first > last || last >= v.slices) throw UsageError("crop_slices: invalid slice range");
    LabelVolume out(last - first + 1, v.height, v.width);
    std::copy(v.labels.begin() + static_cast<std::ptrdiff_t>(first * v.slice_size()),
              v.labels.begin() + static_cast<std::ptrdiff_t>((last + 1) * v.slice_size()), out.labels.begin());
    return out;
}

PatientMetrics evaluate_patient(const std::string& id, const LabelVolume& pred, const LabelVolume& gt,
                                const Spacing& spacing) {
    require_same_shape(pred, gt, "evaluate_patient");
    PatientMetrics pm;
    pm.id = id;
    const auto split = part_split(gt);
    for (std::uint8_t z = 0; z < 2; ++z) {
        const std::uint8_t cls = z == 0 ? kTransitionZone : kPeripheralZone;
        const auto compute = [&](const LabelVolume& p, const LabelVolume& g) {
            return ZoneMetrics{iou(p, g, cls), dice(p, g, cls), ravd(p, g, cls), assd(p, g, cls, spacing)};
        };
        pm.zones[z][0] = compute(pred, gt);
        if (!split) continue;
        const std::vector<std::size_t>* ranges[3] = {&split->apex, &split->mid, &split->base};
        for (int k = 0; k < 3; ++k) {
            const auto& r = *ranges[k];
            pm.zones[z][k + 1] = compute(crop_slices(pred, r.front(), r.back()), crop_slices(gt, r.front(), r.back()));
        }
    }
    return pm;
}

const char* metric_name(Metric m) {
    switch (m) {
    case Metric::iou: return "iou";
    case Metric::dice: return "dice";
    case Metric::ravd: return "ravd";
    case Metric::assd: return "assd";
    }
    return "?";
}

Metric parse_metric(const std::string& name) {
    for (Metric m : {Metric::iou, Metric::dice, Metric::ravd, Metric::assd}) {
        if (name == metric_name(m)) return m;
    }
    throw UsageError("unknown metric '" + name + "' (expected iou, dice, ravd or assd)");
}

const char* zone_name(std::uint8_t cls) { return cls == kTransitionZone ? "TZ" : "PZ"; }

std::uint8_t parse_zone(const std::string& name) {
    if (name == "TZ") return kTransitionZone;
    if (name == "PZ") return kPeripheralZone;
    throw UsageError("unknown zone '" + name + "' (expected TZ or PZ)");
}

std::vector<double> MetricsReport::values(Metric m, std::uint8_t cls, Part part) const {
    if (cls != kTransitionZone && cls != kPeripheralZone) throw UsageError("metrics exist for TZ and PZ only");
    std::vector<double> out;
    for (const auto& p : patients) {
        const auto& zm = p.zones[cls - 1][static_cast<std::size_t>(part)];
        if (!zm) continue;
        std::optional<double> v;
        switch (m) {
        case Metric::iou: v = zm->iou; break;
        case Metric::dice: v = zm->dice; break;
        case Metric::ravd: v = zm->ravd; break;
        case Metric::assd: v = zm->assd; break;
        }
        if (v) out.push_back(*v);
    }
    return out;
}

Aggregate MetricsReport::aggregate(Metric m, std::uint8_t cls, Part part) const {
    const auto v = values(m, cls, part);
    Aggregate a;
    a.count = v.size();
    a.undefined = patients.size() - v.size();
    if (v.empty()) return a;
    a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double sq = 0.0;
    for (double x : v) sq += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(sq / static_cast<double>(v.size()));
    return a;
}

namespace {

using nlohmann::json;

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace

std::string report_to_json(const MetricsReport& report, int indent) {
    json patients = json::array();
    for (const auto& p : report.patients) {
        json zones = json::object();
        for (std::uint8_t z = 0; z < 2; ++z) {
            json parts = json::object();
            for (Part part : kParts) {
                const auto& zm = p.zones[z][static_cast<std::size_t>(part)];
                if (!zm) {
                    parts[part_name(part)] = nullptr;
                    continue;
                }
                parts[part_name(part)] = json{{"iou", zm->iou},
                                              {"dice", zm->dice},
                                              {"ravd", optional_json(zm->ravd)},
                                              {"assd", optional_json(zm->assd)}};
            }
            zones[zone_name(static_cast<std::uint8_t>(z + 1))] = parts;
        }
        patients.push_back(json{{"id", p.id}, {"zones", zones}});
    }
    json aggregates = json::object();
    for (std::uint8_t cls : {kTransitionZone, kPeripheralZone}) {
        json parts = json::object();
        for (Part part : kParts) {
            json metrics = json::object();
            for (Metric m : {Metric::iou, Metric::dice, Metric::ravd, Metric::assd}) {
                const Aggregate a = report.aggregate(m, cls, part);
                metrics[metric_name(m)] =
                    json{{"mean", a.mean}, {"std", a.std}, {"count", a.count}, {"undefined", a.undefined}};
            }
            parts[part_name(part)] = metrics;
        }
        aggregates[zone_name(cls)] = parts;
    }
    json doc{{"format", "catnet-metrics"}, {"version", 1}, {"patients", patients}, {"aggregates", aggregates}};
    return doc.dump(indent);
}

MetricsReport report_from_json(const std::string& text) {
    MetricsReport r;
    try {
        const json doc = json::parse(text);
        if (doc.at("format").get<std::string>() != "catnet-metrics") throw DataError("not a metrics report");
        for (const auto& p : doc.at("patients")) {
            PatientMetrics pm;
            pm.id = p.at("id").get<std::string>();
            for (std::uint8_t z = 0; z < 2; ++z) {
                const json& parts = p.at("zones").at(zone_name(static_cast<std::uint8_t>(z + 1)));
                for (Part part : kParts) {
                    const json& e = parts.at(part_name(part));
                    if (e.is_null()) continue;
                    pm.zones[z][static_cast<std::size_t>(part)] =
                        ZoneMetrics{e.at("iou").get<double>(), e.at("dice").get<double>(), optional_from(e.at("ravd")),
                                    optional_from(e.at("assd"))};
                }
            }
            r.patients.push_back(std::move(pm));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed metrics report: ") + e.what());
    }
    return r;
}

UTestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b, UTestMethod method) {
    const std::size_t n = a.size(), m = b.size();
    if (n == 0 || m == 0) throw UsageError("mann_whitney_u: both samples must be non-empty");
    const std::size_t total = n + m;
    std::vector<std::pair<double, std::size_t>> all;
    all.reserve(total);
    for (std::size_t i = 0; i < n; ++i) all.emplace_back(a[i], i);
    for (std::size_t j = 0; j < m; ++j) all.emplace_back(b[j], n + j);
    std::sort(all.begin(), all.end());

    // Doubled midranks keep tied ranks integral.
    std::vector<std::size_t> rank2(total);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < total;) {
        std::size_t j = i;
        while (j < total && all[j].first == all[i].first) ++j;
        const std::size_t r2 = i + j + 1;  // 2 · (average of ranks i+1 .. j)
        for (std::size_t k = i; k < j; ++k) rank2[all[k].second] = r2;
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    std::size_t sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) sum2 += rank2[i];
    const double nd = static_cast<double>(n), md = static_cast<double>(m);
    UTestResult res;
    res.u = static_cast<double>(sum2) / 2.0 - nd * (nd + 1.0) / 2.0;
    const double mu = nd * md / 2.0;

    if (all.front().first == all.back().first) {
        res.p = 1.0;
        res.exact = method != UTestMethod::normal && (method == UTestMethod::exact || n * m <= 64);
        return res;
    }

    const bool exact = method == UTestMethod::exact || (method == UTestMethod::automatic && n * m <= 64);
    if (exact) {
        // count[k][s]: subsets of k items whose doubled ranks sum to s.
        std::size_t max_sum = 0;
        for (auto r : rank2) max_sum += r;
        std::vector<std::vector<double>> cnt(n + 1, std::vector<double>(max_sum + 1, 0.0));
        cnt[0][0] = 1.0;
        for (std::size_t item = 0; item < total; ++item) {
            const std::size_t r = rank2[item];
            for (std::size_t k = std::min(item + 1, n); k >= 1; --k) {
                for (std::size_t s = max_sum; s >= r; --s) cnt[k][s] += cnt[k - 1][s - r];
            }
        }
        // Mean doubled rank sum is n·(N+1); compare deviations in doubled units.
        const long long center = static_cast<long long>(n * (total + 1));
        const long long observed = std::llabs(static_cast<long long>(sum2) - center);
        double extreme = 0.0, all_count = 0.0;
        for (std::size_t s = 0; s <= max_sum; ++s) {
            if (cnt[n][s] == 0.0) continue;
            all_count += cnt[n][s];
            if (std::llabs(static_cast<long long>(s) - center) >= observed) extreme += cnt[n][s];
        }
        res.p = std::min(1.0, extreme / all_count);
        res.exact = true;
        return res;
    }

    const double N = static_cast<double>(total);
    const double var = nd * md / 12.0 * ((N + 1.0) - tie_term / (N * (N - 1.0)));
    if (var <= 0.0) {
        res.p = 1.0;
        return res;
    }
    const double dev = std::max(0.0, std::abs(res.u - mu) - 0.5);
    res.z = std::copysign(dev / std::sqrt(var), res.u - mu);
    res.p = std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
    return res;
}

} // namespace catnet
