#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"

#include "catnet/dataset.hpp"
#include "catnet/errors.hpp"
#include "catnet/phantom.hpp"
#include "catnet/volume_io.hpp"

using namespace catnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("catnet_test_synthdata_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

bool slice_has_prostate(const LabelVolume& v, std::size_t s) {
    for (std::size_t i = 0; i < v.slice_size(); ++i) {
        if (v.labels[s * v.slice_size() + i] != kBackground) return true;
    }
    return false;
}

// Dice of a fixed-threshold single-slice classifier over a set of slices, summed over both zones.
struct Overlap {
    double inter = 0, pred = 0, gt = 0;
    double dice() const { return pred + gt == 0 ? 1.0 : 2 * inter / (pred + gt); }
};

void threshold_overlap(const Phantom& ph, const PhantomSpec& spec, std::size_t s, Overlap& acc) {
    const double t_low = 0.5 * (spec.background_mean + spec.tz_mean);
    const double t_high = 0.5 * (spec.tz_mean + spec.pz_mean);
    const auto& lab = ph.labels;
    for (std::size_t r = 0; r < lab.height; ++r) {
        for (std::size_t c = 0; c < lab.width; ++c) {
            const double v = ph.volume.intensities[(s * lab.height + r) * lab.width + c];
            const int pred = v < t_low ? 0 : v < t_high ? 1 : 2;
            const int gt = lab.at(s, r, c);
            for (int z = 1; z <= 2; ++z) {
                acc.pred += pred == z;
                acc.gt += gt == z;
                acc.inter += pred == z && gt == z;
            }
        }
    }
}

} // namespace

TEST_CASE("phantom generation is deterministic per (seed, patient)") {
    PhantomSpec spec;
    const Phantom a = generate_phantom(spec, 3);
    const Phantom b = generate_phantom(spec, 3);
    CHECK(a.volume.intensities == b.volume.intensities);
    CHECK(a.labels == b.labels);
    const Phantom c = generate_phantom(spec, 4);
    CHECK_FALSE(a.labels == c.labels);
}

TEST_CASE("generated masks satisfy the label invariants over 100 phantoms") {
    PhantomSpec spec;
    for (std::size_t p = 0; p < 100; ++p) {
        const Phantom ph = generate_phantom(spec, p);
        const auto& lab = ph.labels;
        REQUIRE(lab.slices == spec.slices);
        for (auto v : lab.labels) REQUIRE(v < kNumClasses);
        for (float v : ph.volume.intensities.values()) REQUIRE((v >= 0.0f && v <= 1.0f));

        std::vector<std::size_t> bearing;
        for (std::size_t s = 0; s < lab.slices; ++s) {
            if (slice_has_prostate(lab, s)) bearing.push_back(s);
        }
        REQUIRE(bearing.size() >= 7);
        CHECK(bearing.back() - bearing.front() + 1 == bearing.size());
        CHECK(bearing.front() == ph.first_slice);
        CHECK(bearing.back() == ph.last_slice);

        for (std::size_t i = 0; i < lab.size(); ++i) {
            if (lab.labels[i] != kBackground) REQUIRE(ph.gland.labels[i] == 1);
        }
        // Mid-gland slices: PZ lies posterior to (below) the TZ.
        const std::size_t mid = (ph.first_slice + ph.last_slice) / 2;
        double tz_row = 0, pz_row = 0, tz_n = 0, pz_n = 0;
        for (std::size_t r = 0; r < lab.height; ++r) {
            for (std::size_t c = 0; c < lab.width; ++c) {
                if (lab.at(mid, r, c) == kTransitionZone) tz_row += r, ++tz_n;
                if (lab.at(mid, r, c) == kPeripheralZone) pz_row += r, ++pz_n;
            }
        }
        REQUIRE(tz_n > 0);
        REQUIRE(pz_n > 0);
        CHECK(pz_row / pz_n > tz_row / tz_n);
    }
}

TEST_CASE("ambiguity 0 keeps apex and base contrast equal to mid-gland contrast") {
    PhantomSpec spec;
    spec.ambiguity = 0.0;
    spec.noise = 0.0;
    spec.texture = 0.0;
    const Phantom ph = generate_phantom(spec, 0);
    std::set<float> pz_levels;
    for (std::size_t i = 0; i < ph.labels.size(); ++i) {
        if (ph.labels.labels[i] == kPeripheralZone) pz_levels.insert(ph.volume.intensities[i]);
    }
    CHECK(pz_levels.size() == 1);

    spec.ambiguity = 0.5;
    const Phantom amb = generate_phantom(spec, 0);
    pz_levels.clear();
    for (std::size_t i = 0; i < amb.labels.size(); ++i) {
        if (amb.labels.labels[i] == kPeripheralZone) pz_levels.insert(amb.volume.intensities[i]);
    }
    CHECK(pz_levels.size() == 2);
}

TEST_CASE("single-slice threshold classifier is worse on apex/base than mid-gland") {
    PhantomSpec spec;
    Overlap outer, mid;
    for (std::size_t p = 0; p < 30; ++p) {
        const Phantom ph = generate_phantom(spec, p);
        for (std::size_t s = ph.first_slice; s <= ph.last_slice; ++s) {
            const bool is_outer = s < ph.first_slice + 3 || s + 3 > ph.last_slice;
            threshold_overlap(ph, spec, s, is_outer ? outer : mid);
        }
    }
    MESSAGE("threshold oracle Dice: apex/base " << outer.dice() << ", mid " << mid.dice());
    CHECK(outer.dice() < mid.dice());
}

TEST_CASE("texture field: requested spread, smooth within a slice, independent across slices") {
    PhantomSpec spec;
    spec.noise = 0.0;
    spec.texture = 0.05;
    spec.ambiguity = 0.0;
    double sq = 0.0, lag_x = 0.0, lag_z = 0.0;
    std::size_t n = 0, nx = 0, nz = 0;
    for (std::size_t p = 0; p < 6; ++p) {
        const Phantom ph = generate_phantom(spec, p);
        const auto& img = ph.volume.intensities;
        const std::size_t l = ph.labels.slices, h = ph.labels.height, w = ph.labels.width;
        const auto dev = [&](std::size_t s, std::size_t r, std::size_t c) {
            return static_cast<double>(img[(s * h + r) * w + c]) - spec.background_mean;
        };
        // Outside the gland envelope on every slice, so the level is the background mean throughout.
        const auto clear = [&](std::size_t r, std::size_t c) {
            for (std::size_t s = 0; s < l; ++s)
                if (ph.gland.at(s, r, c) != 0) return false;
            return true;
        };
        for (std::size_t s = 0; s < l; ++s) {
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t c = 0; c + 1 < w; ++c) {
                    if (!clear(r, c) || !clear(r, c + 1)) continue;
                    sq += dev(s, r, c) * dev(s, r, c);
                    ++n;
                    lag_x += dev(s, r, c) * dev(s, r, c + 1);
                    ++nx;
                    if (s + 1 < l) {
                        lag_z += dev(s, r, c) * dev(s + 1, r, c);
                        ++nz;
                    }
                }
            }
        }
    }
    const double var = sq / static_cast<double>(n);
    CHECK(std::sqrt(var) == doctest::Approx(spec.texture).epsilon(0.15));
    // Gaussian smoothing with sigma 4 px gives neighbour correlation exp(-1/64).
    CHECK(lag_x / static_cast<double>(nx) / var > 0.9);
    CHECK(std::abs(lag_z / static_cast<double>(nz) / var) < 0.1);
}

TEST_CASE("phantom spec validation") {
    PhantomSpec spec;
    spec.slices = 7;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = PhantomSpec{};
    spec.spacing.slice = 1.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = PhantomSpec{};
    spec.ambiguity = 1.5;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("volume files round-trip bit-exactly") {
    const auto dir = scratch("roundtrip");
    PhantomSpec spec;
    const Phantom ph = generate_phantom(spec, 1);
    save_volume(dir / "img.catv", ph.volume);
    save_volume(dir / "lab.catv", ph.labels);
    const Volume img = load_volume(dir / "img.catv", spec.spacing);
    CHECK(img.intensities == ph.volume.intensities);
    CHECK(img.spacing == spec.spacing);
    CHECK(load_labels(dir / "lab.catv") == ph.labels);

    const auto bytes = read_file(dir / "lab.catv");
    CHECK(bytes.size() == 4 + 2 + 1 + 1 + 3 * 4 + ph.labels.size());
    CHECK(bytes[6] == 1);
    CHECK(bytes[7] == 3);
}

TEST_CASE("malformed volume files raise format errors with offsets") {
    LabelVolume lab(2, 3, 4, kTransitionZone);
    const auto dir = scratch("corrupt");
    save_volume(dir / "lab.catv", lab);
    const auto good = read_file(dir / "lab.catv");

    SUBCASE("bad magic") {
        auto bytes = good;
        bytes[0] = 'X';
        try {
            decode_volume_file(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
        write_file(dir / "bad.catv", bytes);
        CHECK_THROWS_AS(load_labels(dir / "bad.catv"), FormatError);
    }
    SUBCASE("truncated payload") {
        auto bytes = good;
        bytes.pop_back();
        CHECK_THROWS_AS(decode_volume_file(bytes), FormatError);
    }
    SUBCASE("dims product differs from payload length") {
        auto bytes = good;
        bytes[8] = 3;  // first dim 2 -> 3
        CHECK_THROWS_AS(decode_volume_file(bytes), FormatError);
        bytes[8] = 1;
        CHECK_THROWS_AS(decode_volume_file(bytes), FormatError);
    }
    SUBCASE("dims overflow") {
        auto bytes = good;
        for (int i = 8; i < 20; ++i) bytes[i] = 0xff;
        try {
            decode_volume_file(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() >= 8);
            CHECK(e.offset() < 20);
        }
    }
    SUBCASE("wrong dtype for images") {
        CHECK_THROWS_AS(load_volume(dir / "lab.catv"), FormatError);
    }
    SUBCASE("label value out of range") {
        auto bytes = good;
        bytes.back() = 7;
        write_file(dir / "range.catv", bytes);
        CHECK_THROWS_AS(load_labels(dir / "range.catv"), DataError);
    }
}

TEST_CASE("split_dataset sizes, coverage and determinism") {
    const auto s = split_dataset(100, {0.8, 0.1, 0.1}, 42);
    CHECK(s.train.size() == 80);
    CHECK(s.val.size() == 10);
    CHECK(s.test.size() == 10);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 100);
    CHECK(*all.rbegin() == 99);

    const auto again = split_dataset(100, {0.8, 0.1, 0.1}, 42);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
    CHECK(split_dataset(100, {0.8, 0.1, 0.1}, 43).train != s.train);

    const auto odd = split_dataset(11, {0.5, 0.25, 0.25}, 1);
    CHECK(odd.train.size() == 5);  // 5.5 / 2.75 / 2.75: both leftovers go to the larger fractions
    CHECK(odd.val.size() == 3);
    CHECK(odd.test.size() == 3);

    CHECK_THROWS_AS(split_dataset(5, {0.9, 0.1, 0.0}, 1), ConfigError);
    CHECK_THROWS_AS(split_dataset(100, {0.5, 0.1, 0.1}, 1), ConfigError);
}

TEST_CASE("generated dataset is byte-identical across runs and loads back") {
    DatasetOptions opt;
    opt.phantom.patients = 8;
    const auto a = scratch("ds_a");
    const auto b = scratch("ds_b");
    generate_dataset(opt, a);
    generate_dataset(opt, b);
    for (const auto& entry : fs::directory_iterator(a)) {
        CHECK(read_file(entry.path()) == read_file(b / entry.path().filename()));
    }
    const Manifest m = load_manifest(a / "manifest.json");
    REQUIRE(m.patients.size() == 8);
    CHECK(m.split("train").size() + m.split("val").size() + m.split("test").size() == 8);
    CHECK(load_labels(m.patients[2].labels) == generate_phantom(opt.phantom, 2).labels);
    CHECK(m.patients[0].spacing == opt.phantom.spacing);
    CHECK_THROWS_AS(load_manifest(a / "missing.json"), DataError);
}
