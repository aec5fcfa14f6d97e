#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "doctest.h"

#include "catnet/errors.hpp"
#include "catnet/metrics.hpp"

using namespace catnet;

namespace {

LabelVolume random_mask(std::size_t l, std::size_t h, std::size_t w, double density, std::mt19937_64& rng) {
    LabelVolume v(l, h, w);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& x : v.labels) {
        const double r = u(rng);
        x = r < density ? kTransitionZone : r < 2 * density ? kPeripheralZone : kBackground;
    }
    return v;
}

// All-pairs oracle for ASSD, computed straight from the definition.
std::optional<double> assd_oracle(const LabelVolume& p, const LabelVolume& g, std::uint8_t cls, const Spacing& sp) {
    auto is_fg = [&](const LabelVolume& v, long s, long r, long c) {
        if (s < 0 || r < 0 || c < 0 || s >= long(v.slices) || r >= long(v.height) || c >= long(v.width)) return false;
        return v.at(s, r, c) == cls;
    };
    auto surface = [&](const LabelVolume& v) {
        std::vector<std::array<long, 3>> out;
        for (long s = 0; s < long(v.slices); ++s)
            for (long r = 0; r < long(v.height); ++r)
                for (long c = 0; c < long(v.width); ++c) {
                    if (!is_fg(v, s, r, c)) continue;
                    if (!is_fg(v, s - 1, r, c) || !is_fg(v, s + 1, r, c) || !is_fg(v, s, r - 1, c) ||
                        !is_fg(v, s, r + 1, c) || !is_fg(v, s, r, c - 1) || !is_fg(v, s, r, c + 1)) {
                        out.push_back({s, r, c});
                    }
                }
        return out;
    };
    const auto a = surface(p), b = surface(g);
    if (a.empty() || b.empty()) return std::nullopt;
    auto nearest = [&](const std::array<long, 3>& x, const std::vector<std::array<long, 3>>& set) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& y : set) {
            const double ds = (x[0] - y[0]) * sp.slice, dr = (x[1] - y[1]) * sp.row, dc = (x[2] - y[2]) * sp.col;
            best = std::min(best, std::sqrt(ds * ds + dr * dr + dc * dc));
        }
        return best;
    };
    double total = 0;
    for (const auto& x : a) total += nearest(x, b);
    for (const auto& y : b) total += nearest(y, a);
    return total / double(a.size() + b.size());
}

// Exact two-sided p by enumerating every assignment of the pooled values to sample a.
double exact_p_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pooled = a;
    pooled.insert(pooled.end(), b.begin(), b.end());
    const std::size_t N = pooled.size(), n = a.size();
    std::vector<double> ranks(N);
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto x, auto y) { return pooled[x] < pooled[y]; });
    for (std::size_t i = 0; i < N;) {
        std::size_t j = i;
        while (j < N && pooled[idx[j]] == pooled[idx[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = (i + j + 1) / 2.0;
        i = j;
    }
    double observed = 0;
    for (std::size_t i = 0; i < n; ++i) observed += ranks[i];
    const double center = n * (N + 1) / 2.0;
    std::vector<bool> pick(N, false);
    std::fill(pick.begin(), pick.begin() + n, true);
    double extreme = 0, total = 0;
    do {
        double s = 0;
        for (std::size_t i = 0; i < N; ++i) s += pick[i] ? ranks[i] : 0;
        total += 1;
        if (std::abs(s - center) >= std::abs(observed - center) - 1e-9) extreme += 1;
    } while (std::prev_permutation(pick.begin(), pick.end()));
    return extreme / total;
}

} // namespace

TEST_CASE("overlap metric examples") {
    LabelVolume g(1, 2, 4), p(1, 2, 4);
    std::fill(g.labels.begin(), g.labels.end(), kTransitionZone);        // |G| = 8
    std::fill(p.labels.begin(), p.labels.begin() + 4, kTransitionZone);  // |P| = 4, overlap 4
    CHECK(iou(p, g, kTransitionZone) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(dice(p, g, kTransitionZone) == doctest::Approx(8.0 / 12.0).epsilon(1e-15));
    CHECK(*ravd(p, g, kTransitionZone) == doctest::Approx(50.0));
    CHECK(iou(g, g, kTransitionZone) == 1.0);
    CHECK(dice(g, g, kTransitionZone) == 1.0);
    CHECK(*ravd(g, g, kTransitionZone) == 0.0);

    LabelVolume empty(1, 2, 4);
    CHECK(*ravd(empty, g, kTransitionZone) == 100.0);
    CHECK_FALSE(ravd(g, empty, kTransitionZone).has_value());
    CHECK(iou(empty, empty, kPeripheralZone) == 1.0);
    CHECK(dice(empty, empty, kPeripheralZone) == 1.0);

    LabelVolume a(1, 1, 4), b(1, 1, 4);
    a.labels = {1, 1, 0, 0};
    b.labels = {0, 0, 1, 1};
    CHECK(iou(a, b, 1) == 0.0);
    CHECK(dice(a, b, 1) == 0.0);

    CHECK_THROWS_AS(iou(a, g, 1), UsageError);
}

TEST_CASE("assd examples") {
    const Spacing sp{1.0, 1.0, 3.0};
    LabelVolume a(3, 4, 4), b(3, 4, 4);
    a.at(0, 1, 1) = kTransitionZone;
    b.at(1, 1, 1) = kTransitionZone;
    CHECK(*assd(a, b, kTransitionZone, sp) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(*assd(a, a, kTransitionZone, sp) == 0.0);
    CHECK_FALSE(assd(a, LabelVolume(3, 4, 4), kTransitionZone, sp).has_value());
}

TEST_CASE("metrics agree with brute-force oracles on 100 random masks") {
    std::mt19937_64 rng(2024);
    const Spacing sp{0.625, 0.8, 3.0};
    double worst_assd = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const double density = 0.05 + 0.3 * (trial % 10) / 10.0;
        const auto p = random_mask(6, 8, 8, density, rng);
        const auto g = random_mask(6, 8, 8, density * 0.8, rng);
        for (std::uint8_t cls : {kTransitionZone, kPeripheralZone}) {
            std::size_t np = 0, ng = 0, both = 0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                np += p.labels[i] == cls;
                ng += g.labels[i] == cls;
                both += p.labels[i] == cls && g.labels[i] == cls;
            }
            const double u = double(np + ng - both);
            CHECK(iou(p, g, cls) == (u == 0 ? 1.0 : both / u));
            CHECK(dice(p, g, cls) == (np + ng == 0 ? 1.0 : 2.0 * both / double(np + ng)));
            if (ng > 0) CHECK(*ravd(p, g, cls) == 100.0 * std::abs(double(np) - double(ng)) / double(ng));

            const double i = iou(p, g, cls), d = dice(p, g, cls);
            CHECK(std::abs(d - 2 * i / (1 + i)) < 1e-12);
            CHECK(d >= i);

            const auto fast = assd(p, g, cls, sp);
            const auto slow = assd_oracle(p, g, cls, sp);
            REQUIRE(fast.has_value() == slow.has_value());
            if (fast) {
                worst_assd = std::max(worst_assd, std::abs(*fast - *slow));
                CHECK(*assd(g, p, cls, sp) == *fast);
            }
        }
    }
    CHECK(worst_assd < 1e-9);
}

TEST_CASE("whole-volume metrics are invariant to a shared slice permutation") {
    std::mt19937_64 rng(7);
    const auto p = random_mask(5, 6, 6, 0.2, rng);
    const auto g = random_mask(5, 6, 6, 0.2, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    auto permute = [&](const LabelVolume& v) {
        LabelVolume out(v.slices, v.height, v.width);
        for (std::size_t s = 0; s < v.slices; ++s) {
            std::copy_n(v.labels.begin() + perm[s] * v.slice_size(), v.slice_size(),
                        out.labels.begin() + s * v.slice_size());
        }
        return out;
    };
    const auto pp = permute(p), gp = permute(g);
    for (std::uint8_t cls : {kTransitionZone, kPeripheralZone}) {
        CHECK(iou(p, g, cls) == iou(pp, gp, cls));
        CHECK(dice(p, g, cls) == dice(pp, gp, cls));
        CHECK(*ravd(p, g, cls) == *ravd(pp, gp, cls));
    }
}

TEST_CASE("part split follows the first-three/last-three rule") {
    LabelVolume g(20, 2, 2);
    for (std::size_t s = 4; s <= 15; ++s) g.at(s, 0, 0) = kPeripheralZone;
    const auto split = part_split(g);
    REQUIRE(split.has_value());
    CHECK(split->apex == std::vector<std::size_t>{4, 5, 6});
    CHECK(split->base == std::vector<std::size_t>{13, 14, 15});
    CHECK(split->mid == std::vector<std::size_t>{7, 8, 9, 10, 11, 12});

    LabelVolume seven(9, 1, 1);
    for (std::size_t s = 1; s <= 7; ++s) seven.at(s, 0, 0) = kTransitionZone;
    CHECK(part_split(seven)->mid == std::vector<std::size_t>{4});

    LabelVolume six(9, 1, 1);
    for (std::size_t s = 1; s <= 6; ++s) six.at(s, 0, 0) = kTransitionZone;
    CHECK_FALSE(part_split(six).has_value());
    CHECK_FALSE(part_split(LabelVolume(9, 1, 1)).has_value());
}

TEST_CASE("patient evaluation covers every zone and part") {
    std::mt19937_64 rng(3);
    LabelVolume g(10, 6, 6);
    for (std::size_t s = 1; s <= 8; ++s) {
        for (std::size_t i = 0; i < 12; ++i) g.labels[s * 36 + i] = kTransitionZone;
        for (std::size_t i = 12; i < 24; ++i) g.labels[s * 36 + i] = kPeripheralZone;
    }
    const auto self = evaluate_patient("p000", g, g, Spacing{});
    for (int z = 0; z < 2; ++z) {
        for (Part part : kParts) {
            const auto& m = self.zones[z][static_cast<std::size_t>(part)];
            REQUIRE(m.has_value());
            CHECK(m->dice == 1.0);
            CHECK(m->iou == 1.0);
            CHECK(*m->assd == 0.0);
        }
    }
    // Apex metrics match the metric on the cropped apex range.
    const auto pred = random_mask(10, 6, 6, 0.3, rng);
    const auto pm = evaluate_patient("p001", pred, g, Spacing{});
    const auto apex_p = crop_slices(pred, 1, 3), apex_g = crop_slices(g, 1, 3);
    CHECK(pm.zones[1][1]->dice == dice(apex_p, apex_g, kPeripheralZone));

    MetricsReport r;
    r.patients = {self, pm};
    const auto back = report_from_json(report_to_json(r));
    REQUIRE(back.patients.size() == 2);
    CHECK(back.patients[1].zones[0][2]->dice == pm.zones[0][2]->dice);
    CHECK(back.patients[1].zones[1][0]->assd == pm.zones[1][0]->assd);
    const Aggregate a = r.aggregate(Metric::dice, kPeripheralZone);
    CHECK(a.count == 2);
    CHECK(a.mean == doctest::Approx((1.0 + pm.zones[1][0]->dice) / 2));
}

TEST_CASE("Mann-Whitney U examples and symmetries") {
    const auto r = mann_whitney_u({1, 2}, {3, 4});
    CHECK(r.u == 0.0);
    CHECK(r.exact);
    CHECK(r.p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto same = mann_whitney_u({1, 5, 3}, {3, 1, 5});
    CHECK(same.u == doctest::Approx(4.5));
    CHECK(same.p == doctest::Approx(1.0));

    const std::vector<double> a{0.3, 1.2, 2.2, 0.9, 4.0}, b{1.5, 2.5, 3.1, 3.3};
    const auto ab = mann_whitney_u(a, b), ba = mann_whitney_u(b, a);
    CHECK(ab.u + ba.u == doctest::Approx(20.0));
    CHECK(ab.p == doctest::Approx(ba.p));

    const auto flat = mann_whitney_u({2, 2, 2}, {2, 2});
    CHECK(flat.p == 1.0);
    CHECK_THROWS_AS(mann_whitney_u({}, {1.0}), UsageError);
}

TEST_CASE("Mann-Whitney exact p matches subset enumeration for n·m ≤ 64") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> len(1, 8), val(0, 9);
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<double> a(len(rng)), b(len(rng));
        for (auto& x : a) x = val(rng);  // small integer range forces ties
        for (auto& x : b) x = val(rng) + 1;
        const auto r = mann_whitney_u(a, b);
        REQUIRE(r.exact);
        CHECK(r.p == doctest::Approx(exact_p_oracle(a, b)).epsilon(1e-12));
        CHECK(r.u >= 0.0);
        CHECK(r.u <= double(a.size() * b.size()));
        CHECK(r.p > 0.0);
        CHECK(r.p <= 1.0);
    }
}

TEST_CASE("exact and normal approximation agree for n = m = 8") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> d;
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(8), b(8);
        for (auto& x : a) x = d(rng);
        for (auto& x : b) x = d(rng) + 0.7;
        const double pe = mann_whitney_u(a, b, UTestMethod::exact).p;
        const double pn = mann_whitney_u(a, b, UTestMethod::normal).p;
        worst = std::max(worst, std::abs(pe - pn));
    }
    MESSAGE("max |p_exact − p_normal| = " << worst);
    CHECK(worst < 0.05);
}
