#include "catnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

#include "catnet/errors.hpp"
#include "catnet/volume_io.hpp"

namespace catnet {

using nlohmann::json;

namespace {

constexpr const char* kSplitNames[3] = {"train", "val", "test"};

json spec_to_json(const PhantomSpec& s) {
    return json{{"seed", s.seed},
                {"patients", s.patients},
                {"slices", s.slices},
                {"height", s.height},
                {"width", s.width},
                {"spacing", {s.spacing.row, s.spacing.col, s.spacing.slice}},
                {"noise", s.noise},
                {"ambiguity", s.ambiguity}};
}

} // namespace

std::string patient_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%03zu", index);
    return buf;
}

DatasetSplit split_dataset(std::size_t patients, std::array<double, 3> ratios, std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = ratios[i] * static_cast<double>(patients);
        sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; assigned < patients; ++k, ++assigned) ++sizes[order[k % 3]];
    for (int i = 0; i < 3; ++i) {
        if (sizes[i] == 0) {
            throw ConfigError(std::string("split '") + kSplitNames[i] + "' would be empty for " +
                              std::to_string(patients) + " patients");
        }
    }

    std::vector<std::size_t> ids(patients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    // Fisher-Yates with explicit draws so the order does not depend on std::shuffle.
    for (std::size_t i = patients; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(ids[i - 1], ids[j]);
    }
    DatasetSplit out;
    auto it = ids.begin();
    for (int i = 0; i < 3; ++i) {
        auto& dst = i == 0 ? out.train : i == 1 ? out.val : out.test;
        dst.assign(it, it + static_cast<std::ptrdiff_t>(sizes[i]));
        std::sort(dst.begin(), dst.end());
        it += static_cast<std::ptrdiff_t>(sizes[i]);
    }
    return out;
}

std::vector<const ManifestEntry*> Manifest::split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& p : patients) {
        if (p.split == name) out.push_back(&p);
    }
    return out;
}

Manifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& dir) {
    options.phantom.validate();
    const DatasetSplit split = split_dataset(options.phantom.patients, options.ratios, options.split_seed);
    std::vector<std::string> assignment(options.phantom.patients);
    for (auto i : split.train) assignment[i] = "train";
    for (auto i : split.val) assignment[i] = "val";
    for (auto i : split.test) assignment[i] = "test";

    std::filesystem::create_directories(dir);
    Manifest m;
    m.root = std::filesystem::absolute(dir);
    json entries = json::array();
    for (std::size_t i = 0; i < options.phantom.patients; ++i) {
        const Phantom ph = generate_phantom(options.phantom, i);
        ManifestEntry e;
        e.id = patient_id(i);
        e.index = i;
        e.image = m.root / (e.id + "_image.catv");
        e.labels = m.root / (e.id + "_labels.catv");
        e.spacing = options.phantom.spacing;
        e.split = assignment[i];
        save_volume(e.image, ph.volume);
        save_volume(e.labels, ph.labels);
        entries.push_back(json{{"id", e.id},
                               {"index", i},
                               {"image", e.image.filename().string()},
                               {"labels", e.labels.filename().string()},
                               {"spacing", {e.spacing.row, e.spacing.col, e.spacing.slice}},
                               {"split", e.split}});
        m.patients.push_back(std::move(e));
    }
    json doc{{"format", "catnet-dataset"},
             {"version", 1},
             {"phantom", spec_to_json(options.phantom)},
             {"ratios", options.ratios},
             {"split_seed", options.split_seed},
             {"patients", entries}};
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
    out << doc.dump(2) << '\n';
    return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    Manifest m;
    m.root = std::filesystem::absolute(path).parent_path();
    try {
        if (doc.at("format").get<std::string>() != "catnet-dataset") throw DataError("unknown manifest format");
        for (const auto& p : doc.at("patients")) {
            ManifestEntry e;
            e.id = p.at("id").get<std::string>();
            e.index = p.at("index").get<std::size_t>();
            e.image = m.root / p.at("image").get<std::string>();
            e.labels = m.root / p.at("labels").get<std::string>();
            const auto sp = p.at("spacing").get<std::vector<double>>();
            if (sp.size() != 3) throw DataError("patient " + e.id + ": spacing needs 3 values");
            e.spacing = {sp[0], sp[1], sp[2]};
            e.split = p.at("split").get<std::string>();
            m.patients.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    return m;
}

} // namespace catnet
