#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"
#include "catnet/volume_io.hpp"

using namespace catnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("catnet_test_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

DatasetOptions tiny_dataset(std::size_t patients) {
    DatasetOptions o;
    auto& s = o.phantom;
    s.patients = patients;
    s.slices = 9;
    s.height = 32;
    s.width = 32;
    s.gland_slices_min = 7;
    s.gland_slices_max = 7;
    s.gland_radius_min = 7;
    s.gland_radius_max = 9;
    s.center_jitter = 2;
    s.center_drift = 1;
    o.ratios = {0.5, 0.25, 0.25};
    return o;
}

TrainConfig tiny_config(const fs::path& manifest, const fs::path& out) {
    TrainConfig c;
    auto& n = c.network;
    n.scales = 2;
    n.filters = {4, 8, 16};
    n.slices = 9;
    n.height = 32;
    n.width = 32;
    n.blocks = 1;
    n.heads = 2;
    n.pool = 2;
    n.cat_layers = {0, 1, 2};
    c.epochs = 2;
    c.lr = 1e-3;
    c.seed = 3;
    c.data = manifest;
    c.output = out;
    return c;
}

// Shared tiny dataset with 2 train, 1 val and 1 test patient.
const fs::path& tiny_manifest() {
    static const fs::path path = [] {
        const auto dir = scratch("data");
        generate_dataset(tiny_dataset(4), dir);
        return dir / "manifest.json";
    }();
    return path;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) { return read_file(p); }

std::string text_of(const fs::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

template <typename T>
void check_same_state(TrainState<T>& a, TrainState<T>& b) {
    auto pa = named_parameters(a.net);
    auto pb = named_parameters(b.net);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CAPTURE(pa[i].name);
        CHECK(pa[i].tensor->values() == pb[i].tensor->values());
        CHECK(a.optimizer[i].m == b.optimizer[i].m);
        CHECK(a.optimizer[i].v == b.optimizer[i].v);
        CHECK(a.optimizer[i].step == b.optimizer[i].step);
    }
    CHECK(a.epoch == b.epoch);
    CHECK(a.rng_state == b.rng_state);
    CHECK(a.best_epoch == b.best_epoch);
    CHECK(a.best_val == b.best_val);
}

std::vector<std::vector<double>> read_csv(const fs::path& p) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text_of(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(CATNET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("config JSON round-trips and rejects invalid values") {
    TrainConfig c = tiny_config("/data/m.json", "/runs/a");
    c.precision = Precision::f64;
    c.network.pe_enabled = false;
    c.batch = 3;
    const TrainConfig back = config_from_json(config_to_json(c));
    CHECK(config_to_json(back) == config_to_json(c));
    CHECK(back.network.filters == c.network.filters);
    CHECK(back.precision == Precision::f64);

    const TrainConfig defaults = config_from_json("{}");
    CHECK(defaults.epochs == 150);
    CHECK(defaults.lr == 1e-4);
    CHECK(defaults.weight_decay == 1e-5);
    CHECK(defaults.batch == 1);

    CHECK_THROWS_AS(config_from_json(R"({"epoch": 3})"), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"network": {"layers": 3}})"), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"precision": "f16"})"), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"epochs": "many"})"), ConfigError);
    CHECK_THROWS_AS(config_from_json("not json"), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"epochs": 0})").validate(), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"lr": 0})").validate(), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"batch": 0})").validate(), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"network": {"filters": [8, 16]}})").validate(), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), DataError);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
    const auto dir = scratch("ckpt");
    auto state = init_train_state<float>(tiny_config(tiny_manifest(), dir));
    state.epoch = 4;
    state.best_val = 0.25;
    state.best_epoch = 3;
    auto params = named_parameters(state.net);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto n = params[i].tensor->size();
        state.optimizer[i].m.assign(n, 0.5f / static_cast<float>(i + 1));
        state.optimizer[i].v.assign(n, 1e-7f);
        state.optimizer[i].step = 11;
    }
    save_checkpoint(dir / "a.ckpt", state);
    auto loaded = load_checkpoint<float>(dir / "a.ckpt");
    check_same_state(state, loaded);
    save_checkpoint(dir / "b.ckpt", loaded);
    CHECK(bytes_of(dir / "a.ckpt") == bytes_of(dir / "b.ckpt"));
    CHECK(checkpoint_precision(dir / "a.ckpt") == Precision::f32);
    CHECK_THROWS_AS(load_checkpoint<double>(dir / "a.ckpt"), FormatError);

    auto bytes = bytes_of(dir / "a.ckpt");
    auto bad = bytes;
    bad[0] = 'X';
    write_file(dir / "bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "bad.ckpt"), FormatError);
    bad = bytes;
    bad.resize(bytes.size() - 5);
    write_file(dir / "short.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "short.ckpt"), FormatError);

    auto f64 = init_train_state<double>(tiny_config(tiny_manifest(), dir));
    save_checkpoint(dir / "d.ckpt", f64);
    auto f64_back = load_checkpoint<double>(dir / "d.ckpt");
    check_same_state(f64, f64_back);
    CHECK(checkpoint_precision(dir / "d.ckpt") == Precision::f64);
}

TEST_CASE("one epoch on two patients completes with a finite loss") {
    const auto dir = scratch("smoke");
    auto c = tiny_config(tiny_manifest(), dir);
    c.epochs = 1;
    const auto r = train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
    REQUIRE(r.log.size() == 1);
    CHECK(std::isfinite(r.log[0].train_loss));
    CHECK(r.log[0].train_loss > 0.0);
    CHECK(fs::exists(dir / "last.ckpt"));
    CHECK(fs::exists(dir / "best.ckpt"));
    CHECK(r.best_epoch == 1);
    const auto log = text_of(dir / "train_log.csv");
    CHECK(log.rfind("epoch,train_loss,val_dice_tz,val_dice_pz,val_dice_mean\n1,", 0) == 0);
}

TEST_CASE("two runs with the same seed log identical numbers and write identical checkpoints") {
    const auto a = scratch("det_a");
    const auto b = scratch("det_b");
    auto ca = tiny_config(tiny_manifest(), a);
    auto cb = tiny_config(tiny_manifest(), b);
    // The config snapshot holds the output path, so give both runs the same one.
    cb.output = a;
    train(ca, {.resume = {}, .quiet = true, .on_epoch = {}});
    const auto log_a = text_of(a / "train_log.csv");
    const auto ckpt_a = bytes_of(a / "last.ckpt");
    train(cb, {.resume = {}, .quiet = true, .on_epoch = {}});
    CHECK(text_of(a / "train_log.csv") == log_a);
    CHECK(bytes_of(a / "last.ckpt") == ckpt_a);

    auto cs = tiny_config(tiny_manifest(), b);
    cs.seed = 4;
    train(cs, {.resume = {}, .quiet = true, .on_epoch = {}});
    CHECK(text_of(b / "train_log.csv") != log_a);
}

TEST_CASE("resuming from a checkpoint is bit-identical to an uninterrupted run") {
    for (Precision precision : {Precision::f32, Precision::f64}) {
        CAPTURE(static_cast<int>(precision));
        const auto full = scratch("resume_full");
        const auto part = scratch("resume_part");
        auto c = tiny_config(tiny_manifest(), full);
        c.precision = precision;
        c.epochs = 4;
        c.batch = 2;
        train(c, {.resume = {}, .quiet = true, .on_epoch = {}});

        auto first = c;
        first.output = part;
        first.epochs = 2;
        train(first, {.resume = {}, .quiet = true, .on_epoch = {}});
        auto second = first;
        second.epochs = 4;
        const auto r = train(second, {.resume = part / "last.ckpt", .quiet = true, .on_epoch = {}});
        CHECK(r.log.size() == 2);
        CHECK(r.log.front().epoch == 3);

        CHECK(text_of(full / "train_log.csv") == text_of(part / "train_log.csv"));
        if (precision == Precision::f32) {
            auto x = load_checkpoint<float>(full / "last.ckpt");
            auto y = load_checkpoint<float>(part / "last.ckpt");
            check_same_state(x, y);
        } else {
            auto x = load_checkpoint<double>(full / "last.ckpt");
            auto y = load_checkpoint<double>(part / "last.ckpt");
            check_same_state(x, y);
        }
    }
}

TEST_CASE("resume rejects a different network or precision") {
    const auto dir = scratch("resume_bad");
    auto c = tiny_config(tiny_manifest(), dir);
    c.epochs = 1;
    train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
    auto other = c;
    other.network.heads = 1;
    CHECK_THROWS_AS(train(other, {.resume = dir / "last.ckpt", .quiet = true, .on_epoch = {}}), ConfigError);
    other = c;
    other.precision = Precision::f64;
    CHECK_THROWS_AS(train(other, {.resume = dir / "last.ckpt", .quiet = true, .on_epoch = {}}), ConfigError);
}

TEST_CASE("training loss falls over 20 epochs") {
    const auto dir = scratch("progress");
    auto c = tiny_config(tiny_manifest(), dir);
    c.epochs = 20;
    const auto r = train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
    REQUIRE(r.log.size() == 20);
    CHECK(r.log.back().train_loss < r.log.front().train_loss);
}

TEST_CASE("data errors name the offending patient") {
    const auto dir = scratch("bad_data");
    generate_dataset(tiny_dataset(4), dir / "data");
    const Manifest m = load_manifest(dir / "data" / "manifest.json");
    const ManifestEntry* victim = m.split("train").front();
    auto bytes = read_file(victim->labels);
    bytes.back() = 7;
    write_file(victim->labels, bytes);
    auto c = tiny_config(dir / "data" / "manifest.json", dir / "run");
    try {
        train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(victim->id) != std::string::npos);
    }

    auto wrong = tiny_config(tiny_manifest(), dir / "run2");
    wrong.network.height = 64;
    wrong.network.width = 64;
    CHECK_THROWS_AS(train(wrong, {.resume = {}, .quiet = true, .on_epoch = {}}), DataError);
}

TEST_CASE("evaluating ground truth against itself gives perfect overlap for every zone and part") {
    const Manifest m = load_manifest(tiny_manifest());
    std::vector<EvalCase> cases;
    for (const auto& e : m.patients) {
        const auto gt = load_labels(e.labels);
        cases.push_back({e.id, gt, gt, e.spacing});
    }
    const auto report = evaluate_cases(cases);
    REQUIRE(report.patients.size() == m.patients.size());
    for (const auto& p : report.patients) {
        for (int z = 0; z < 2; ++z) {
            for (Part part : kParts) {
                const auto& zm = p.zones[z][static_cast<int>(part)];
                REQUIRE(zm.has_value());
                CHECK(zm->dice == 1.0);
                CHECK(zm->iou == 1.0);
                CHECK(zm->ravd == 0.0);
                CHECK(zm->assd == 0.0);
            }
        }
    }
}

TEST_CASE("evaluate matches a brute-force recomputation on the network's predictions") {
    const auto dir = scratch("eval");
    auto c = tiny_config(tiny_manifest(), dir);
    c.epochs = 3;
    train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
    const auto report = evaluate(dir / "last.ckpt", "train");
    const Manifest m = load_manifest(tiny_manifest());
    const auto entries = m.split("train");
    REQUIRE(report.patients.size() == entries.size());

    auto state = load_checkpoint<float>(dir / "last.ckpt");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto image = load_volume(entries[i]->image).intensities;
        const auto gt = load_labels(entries[i]->labels);
        const auto pred = predict_mask(infer_logits(state.net, image));
        CHECK(report.patients[i].id == entries[i]->id);
        for (std::uint8_t cls : {kTransitionZone, kPeripheralZone}) {
            std::size_t inter = 0, np = 0, ng = 0;
            for (std::size_t v = 0; v < gt.size(); ++v) {
                const bool a = pred.labels[v] == cls, b = gt.labels[v] == cls;
                inter += a && b;
                np += a;
                ng += b;
            }
            const double want_dice = np + ng == 0 ? 1.0 : 2.0 * inter / double(np + ng);
            const double want_iou = np + ng == 0 ? 1.0 : inter / double(np + ng - inter);
            const auto& zm = report.patients[i].zones[cls - 1][0];
            REQUIRE(zm.has_value());
            CHECK(zm->dice == want_dice);
            CHECK(zm->iou == want_iou);
        }
    }
    CHECK_THROWS_AS(evaluate(dir / "last.ckpt", "holdout"), UsageError);
}

TEST_CASE("attention export writes one CSV and PGM per scale, block and head") {
    const auto dir = scratch("export");
    auto c = tiny_config(tiny_manifest(), dir);
    c.epochs = 1;
    train(c, {.resume = {}, .quiet = true, .on_epoch = {}});
    const Manifest m = load_manifest(tiny_manifest());
    const auto files = export_attention(dir / "last.ckpt", m.patients[0].image, dir / "attn");
    const std::size_t expected = c.network.cat_layers.size() * c.network.blocks * c.network.heads;
    CHECK(files.size() == 2 * expected);
    std::size_t csvs = 0;
    for (const auto& f : files) {
        if (f.extension() != ".csv") continue;
        ++csvs;
        const auto rows = read_csv(f);
        REQUIRE(rows.size() == c.network.slices);
        for (const auto& row : rows) {
            REQUIRE(row.size() == c.network.slices);
            double s = 0.0;
            for (double v : row) s += v;
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
    CHECK(csvs == expected);
    CHECK(fs::exists(dir / "attn" / "attn_s0_b0_h0.pgm"));
    CHECK(fs::exists(dir / "attn" / "attn_s2_b0_h1.csv"));
}

TEST_CASE("untrained network on identical slices exports uniform attention images") {
    const auto dir = scratch("export_uniform");
    auto c = tiny_config(tiny_manifest(), dir);
    c.network.pe_enabled = false;
    auto state = init_train_state<float>(c);
    save_checkpoint(dir / "init.ckpt", state);

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Volume v;
    v.intensities = Tensor<float>(Shape{9, 32, 32, 1});
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        const float x = dist(rng);
        for (std::size_t s = 0; s < 9; ++s) v.intensities[s * 32 * 32 + i] = x;
    }
    save_volume(dir / "same.catv", v);
    const auto files = export_attention(dir / "init.ckpt", dir / "same.catv", dir / "attn");
    REQUIRE_FALSE(files.empty());
    for (const auto& f : files) {
        if (f.extension() != ".pgm") continue;
        const auto bytes = bytes_of(f);
        const std::string header = "P5\n9 9\n255\n";
        REQUIRE(bytes.size() == header.size() + 81);
        CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
        for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);
    }
}

TEST_CASE("attention images map the matrix maximum to black") {
    const auto dir = scratch("pgm");
    AttentionRecord<double> r;
    r.layer = 1;
    r.attention = Tensor<double>(Shape{2, 2}, {0.8, 0.2, 0.4, 0.6});
    write_attention_records<double>({r}, dir);
    const auto bytes = bytes_of(dir / "attn_s1_b0_h0.pgm");
    const std::vector<std::uint8_t> px(bytes.end() - 4, bytes.end());
    CHECK(px == std::vector<std::uint8_t>{0, 191, 128, 64});
    CHECK(text_of(dir / "attn_s1_b0_h0.csv") == "0.8,0.2\n0.4,0.6\n");
}

TEST_CASE("run comparison") {
    MetricsReport a, b;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.6, 0.9);
    for (int i = 0; i < 6; ++i) {
        PatientMetrics pa, pb;
        pa.id = pb.id = patient_id(i);
        for (int z = 0; z < 2; ++z) {
            pa.zones[z][0] = ZoneMetrics{0.5, u(rng), 10.0, 1.0};
            pb.zones[z][0] = ZoneMetrics{0.5, u(rng) + 0.3, 10.0, 1.0};
        }
        a.patients.push_back(pa);
        b.patients.push_back(pb);
    }

    SUBCASE("a report compared with itself has p = 1 and no stars") {
        for (const auto& row : compare_all(a, a)) {
            CHECK(row.test.p == 1.0);
            CHECK(row.stars.empty());
            CHECK(row.mean_a == row.mean_b);
        }
    }
    SUBCASE("star thresholds") {
        CHECK(significance_stars(0.01) == "***");
        CHECK(significance_stars(0.0100001) == "**");
        CHECK(significance_stars(0.05) == "**");
        CHECK(significance_stars(0.0500001) == "*");
        CHECK(significance_stars(0.1) == "*");
        CHECK(significance_stars(0.1000001).empty());
    }
    SUBCASE("separated samples give a significant Dice difference") {
        const auto row = compare_runs(a, b, Metric::dice, kPeripheralZone);
        CHECK(row.mean_b > row.mean_a);
        CHECK(row.test.p == doctest::Approx(2.0 / 924.0));
        CHECK(row.stars == "***");
        const auto table = render_comparison({row});
        CHECK(table.find("mean_a") != std::string::npos);
        CHECK(table.find("PZ") != std::string::npos);
        CHECK(table.find("***") != std::string::npos);
    }
    SUBCASE("different patient sets are rejected") {
        b.patients.pop_back();
        CHECK_THROWS_AS(compare_runs(a, b, Metric::dice, kTransitionZone), UsageError);
    }
}

TEST_CASE("gradient suite passes at 64-bit") {
    const auto entries = run_gradient_suite();
    CHECK(entries.size() >= 25);
    for (const auto& e : entries) {
        CAPTURE(e.name);
        CHECK(e.passed);
        CHECK(e.max_rel_error < kGradSuiteTolerance);
    }
}

TEST_CASE("command line") {
    const auto dir = scratch("cli");
    SUBCASE("gen-data is byte-identical across runs") {
        REQUIRE(run_cli("gen-data --seed 7 --patients 10 --out " + (dir / "a").string(), dir / "log") == 0);
        REQUIRE(run_cli("gen-data --seed 7 --patients 10 --out " + (dir / "b").string(), dir / "log") == 0);
        std::size_t files = 0;
        for (const auto& e : fs::directory_iterator(dir / "a")) {
            ++files;
            CHECK(bytes_of(e.path()) == bytes_of(dir / "b" / e.path().filename()));
        }
        CHECK(files == 21);
    }
    SUBCASE("missing config exits 2 and names the path") {
        CHECK(run_cli("train --config " + (dir / "missing.json").string(), dir / "log") == 2);
        CHECK(text_of(dir / "log").find((dir / "missing.json").string()) != std::string::npos);
    }
    SUBCASE("usage and config errors exit 1") {
        CHECK(run_cli("train --config x.json --bogus", dir / "log") == 1);
        CHECK(run_cli("frobnicate", dir / "log") == 1);
        CHECK(run_cli("", dir / "log") == 1);
        std::ofstream(dir / "bad.json") << R"({"epochs": 0})";
        CHECK(run_cli("train --config " + (dir / "bad.json").string(), dir / "log") == 1);
        CHECK(text_of(dir / "log").find("epochs") != std::string::npos);
        std::ofstream(dir / "typo.json") << R"({"epoch": 3})";
        CHECK(run_cli("train --config " + (dir / "typo.json").string(), dir / "log") == 1);
    }
    SUBCASE("train, eval, export and compare run end to end") {
        std::ofstream(dir / "cfg.json") << config_to_json(tiny_config(tiny_manifest(), dir / "run"));
        REQUIRE(run_cli("train --quiet --epochs 1 --config " + (dir / "cfg.json").string(), dir / "log") == 0);
        const auto ckpt = (dir / "run" / "best.ckpt").string();
        REQUIRE(run_cli("eval --checkpoint " + ckpt + " --split val --out " + (dir / "r.json").string(),
                        dir / "log") == 0);
        const auto report = report_from_json(text_of(dir / "r.json"));
        CHECK(report.patients.size() == 1);
        const Manifest m = load_manifest(tiny_manifest());
        CHECK(run_cli("export-attention --checkpoint " + ckpt + " --volume " + m.patients[0].image.string() +
                          " --out " + (dir / "attn").string(),
                      dir / "log") == 0);
        CHECK(fs::exists(dir / "attn" / "attn_s1_b0_h1.pgm"));
        CHECK(run_cli("compare --a " + (dir / "r.json").string() + " --b " + (dir / "r.json").string(),
                      dir / "log") == 0);
        CHECK(text_of(dir / "log").find("mean_b") != std::string::npos);
        CHECK(run_cli("train --quiet --no-cat --epochs 1 --config " + (dir / "cfg.json").string() + " --output " +
                          (dir / "base").string(),
                      dir / "log") == 0);
        auto base = load_checkpoint<float>(dir / "base" / "last.ckpt");
        CHECK(base.config.network.cat_layers.empty());
    }
}
