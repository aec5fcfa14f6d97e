// Acceptance harness: one PASS/FAIL line per criterion, tolerances pinned below.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "catnet/cat_attention.hpp"
#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"
#include "catnet/volume_io.hpp"

using namespace catnet;
namespace fs = std::filesystem;
using T4 = Tensor<double>;

namespace {

constexpr double kGradTolerance = kGradSuiteTolerance;  // 1e-4 max relative error
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kAttentionInputs = 200;
constexpr double kAttentionTolerance = 1e-6;
constexpr double kPeTolerance = 1e-12;
constexpr int kScalarDraws = 50;
constexpr double kScalarTolerance = 1e-12;
constexpr int kMetricMasks = 100;
constexpr double kAssdTolerance = 1e-9;
constexpr double kIdentityTolerance = 1e-12;
constexpr double kMwuTolerance = 1e-12;

// Behavioral thresholds, frozen after the reference run (see README).
constexpr double kCatDiceFloor = 0.85;
constexpr double kPzGainFloor = 0.02;
constexpr double kPzGainAlpha = 0.1;
constexpr double kRunBudgetSeconds = 15 * 60;
constexpr double kPartGapFloor = 0.025;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int failures = 0;

void report(const std::string& name, const Outcome& o) {
    if (!o.pass) ++failures;
    std::printf("%s  %-28s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
}

void run_criterion(const std::string& name, const std::function<Outcome()>& f) {
    try {
        report(name, f());
    } catch (const std::exception& e) {
        report(name, {false, std::string("error: ") + e.what()});
    }
}

T4 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    T4 t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

T4 permute_slices(const T4& x, const std::vector<std::size_t>& perm) {
    T4 out(x.shape());
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        std::copy_n(x.data().data() + perm[i] * per, per, out.data().data() + i * per);
    }
    return out;
}

// ---------------------------------------------------------------- fast suite

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    const auto entries = run_gradient_suite(1);
    const double secs = seconds_since(t0);
    const auto worst = std::max_element(entries.begin(), entries.end(),
                                        [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
    std::size_t failed = 0;
    for (const auto& e : entries) failed += e.passed ? 0 : 1;
    return {failed == 0 && secs < kGradBudgetSeconds,
            fmt("%zu ops, %zu failed, worst %s %.2e (< %.0e), %.1f s (< %.0f s)", entries.size(), failed,
                worst->name.c_str(), worst->max_rel_error, kGradTolerance, secs, kGradBudgetSeconds)};
}

Outcome attention_invariants() {
    std::mt19937_64 rng(11);
    double worst_row = 0.0, worst_uniform = 0.0, worst_perm = 0.0;
    std::size_t matrices = 0;
    for (int trial = 0; trial < kAttentionInputs; ++trial) {
        const std::size_t l = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
        const std::size_t hw = std::size_t{2} << std::uniform_int_distribution<int>(0, 2)(rng);
        const std::size_t c = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
        const std::size_t heads = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
        const std::size_t blocks = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
        const std::size_t pool = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
        auto cat = make_cat_module<double>(l, c, blocks, heads, pool, rng);
        const T4 x = random_tensor({l, hw, hw, c}, rng, -2, 2);

        {
            Tape<double> tape;
            const auto r = cat_module_forward(tape.constant(x), cat, 0, true);
            for (const auto& rec : r.records) {
                ++matrices;
                for (std::size_t i = 0; i < l; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < l; ++j) {
                        const double a = rec.attention[i * l + j];
                        if (a < 0.0) worst_row = std::max(worst_row, -a);
                        s += a;
                    }
                    worst_row = std::max(worst_row, std::abs(s - 1.0));
                }
            }
        }

        cat.pe_enabled = false;
        {
            const std::size_t per = x.size() / l;
            T4 same(x.shape());
            for (std::size_t i = 0; i < same.size(); ++i) same[i] = x[i % per];
            Tape<double> tape;
            const auto r = cat_module_forward(tape.constant(same), cat, 0, true);
            for (const auto& rec : r.records)
                for (double a : rec.attention.data()) worst_uniform = std::max(worst_uniform, std::abs(a - 1.0 / l));
        }
        {
            std::vector<std::size_t> perm(l);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            Tape<double> tape;
            const T4 z = cat_module_forward(tape.constant(x), cat, 0, false).z.value();
            const T4 zp = cat_module_forward(tape.constant(permute_slices(x, perm)), cat, 0, false).z.value();
            const T4 want = permute_slices(z, perm);
            for (std::size_t i = 0; i < want.size(); ++i) worst_perm = std::max(worst_perm, std::abs(zp[i] - want[i]));
        }
    }
    const bool pass = worst_row <= kAttentionTolerance && worst_uniform <= kAttentionTolerance &&
                      worst_perm <= kAttentionTolerance;
    return {pass, fmt("%d inputs, %zu matrices: row-sum %.1e, uniform %.1e, equivariance %.1e (<= %.0e)",
                      kAttentionInputs, matrices, worst_row, worst_uniform, worst_perm, kAttentionTolerance)};
}

Outcome positional_encoding() {
    double worst = 0.0;
    for (std::size_t l = 1; l <= 32; ++l) {
        for (std::size_t c = 2; c <= 64; ++c) {
            const T4 pe = init_positional_encoding<double>(l, c);
            for (std::size_t p = 0; p < l; ++p) {
                for (std::size_t j = 0; 2 * j < c; ++j) {
                    // Extended precision, exponent form of 10000^(2j/c).
                    const long double angle =
                        static_cast<long double>(p) * std::exp(-std::log(10000.0L) * (2.0L * j) / static_cast<long double>(c));
                    worst = std::max(worst, static_cast<double>(std::fabs(pe[p * c + 2 * j] - std::sin(angle))));
                    if (2 * j + 1 < c) {
                        worst = std::max(worst, static_cast<double>(std::fabs(pe[p * c + 2 * j + 1] - std::cos(angle))));
                    }
                }
            }
        }
    }
    return {worst <= kPeTolerance, fmt("l <= 32, c <= 64: max |diff| %.2e (<= %.0e)", worst, kPeTolerance)};
}

Outcome scalar_oracle() {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    double worst = 0.0;
    for (int draw = 0; draw < kScalarDraws; ++draw) {
        const double x[2] = {dist(rng), dist(rng)};
        const double wq = dist(rng), wk = dist(rng), wv = dist(rng);
        AttentionHeadParams<double> head{T4(Shape{1, 1}, {wq}), T4(Shape{1, 1}, {wk}), T4(Shape{1, 1}, {wv})};
        Tape<double> tape;
        const auto r = cross_slice_attention(tape.constant(T4(Shape{2, 1, 1, 1}, {x[0], x[1]})), bind(tape, head), 1);
        // Pooling with k = 1 is the identity and the logit divisor is √(1·1·1/1) = 1.
        for (int i = 0; i < 2; ++i) {
            const double e0 = std::exp(x[i] * wq * x[0] * wk), e1 = std::exp(x[i] * wq * x[1] * wk);
            const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
            const double y = a0 * x[0] * wv + a1 * x[1] * wv;
            worst = std::max({worst, std::abs(r.attention.value()[2 * i] - a0),
                              std::abs(r.attention.value()[2 * i + 1] - a1), std::abs(r.y.value()[i] - y)});
        }
    }
    return {worst <= kScalarTolerance,
            fmt("%d weight draws: max |diff| %.2e (<= %.0e)", kScalarDraws, worst, kScalarTolerance)};
}

LabelVolume random_mask(std::mt19937_64& rng, std::size_t l, std::size_t h, std::size_t w) {
    LabelVolume v(l, h, w);
    // A few random boxes of each class so surfaces are non-trivial; sometimes a class is left empty.
    std::uniform_int_distribution<std::size_t> pick(0, 99);
    for (std::uint8_t cls : {std::uint8_t{1}, std::uint8_t{2}}) {
        if (pick(rng) < 10) continue;
        const std::size_t boxes = 1 + pick(rng) % 3;
        for (std::size_t b = 0; b < boxes; ++b) {
            const std::size_t s0 = pick(rng) % l, r0 = pick(rng) % h, c0 = pick(rng) % w;
            const std::size_t s1 = std::min(l, s0 + 1 + pick(rng) % 3), r1 = std::min(h, r0 + 1 + pick(rng) % 4),
                              c1 = std::min(w, c0 + 1 + pick(rng) % 4);
            for (std::size_t s = s0; s < s1; ++s)
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t c = c0; c < c1; ++c) v.at(s, r, c) = cls;
        }
    }
    // Salt noise flips isolated voxels.
    for (auto& x : v.labels)
        if (pick(rng) < 3) x = static_cast<std::uint8_t>(pick(rng) % 3);
    return v;
}

std::set<std::size_t> voxel_set(const LabelVolume& v, std::uint8_t cls) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v.labels[i] == cls) out.insert(i);
    return out;
}

struct Voxel {
    long s, r, c;
};

std::vector<Voxel> surface_of(const LabelVolume& v, std::uint8_t cls) {
    const auto in = [&](long s, long r, long c) {
        return s >= 0 && r >= 0 && c >= 0 && s < static_cast<long>(v.slices) && r < static_cast<long>(v.height) &&
               c < static_cast<long>(v.width) &&
               v.at(static_cast<std::size_t>(s), static_cast<std::size_t>(r), static_cast<std::size_t>(c)) == cls;
    };
    std::vector<Voxel> out;
    for (long s = 0; s < static_cast<long>(v.slices); ++s)
        for (long r = 0; r < static_cast<long>(v.height); ++r)
            for (long c = 0; c < static_cast<long>(v.width); ++c) {
                if (!in(s, r, c)) continue;
                if (!(in(s - 1, r, c) && in(s + 1, r, c) && in(s, r - 1, c) && in(s, r + 1, c) && in(s, r, c - 1) &&
                      in(s, r, c + 1))) {
                    out.push_back({s, r, c});
                }
            }
    return out;
}

std::optional<double> assd_oracle(const LabelVolume& p, const LabelVolume& g, std::uint8_t cls, const Spacing& sp) {
    const auto a = surface_of(p, cls), b = surface_of(g, cls);
    if (a.empty() || b.empty()) return std::nullopt;
    const auto nearest = [&](const Voxel& v, const std::vector<Voxel>& set) {
        double best = INFINITY;
        for (const auto& u : set) {
            const double ds = (v.s - u.s) * sp.slice, dr = (v.r - u.r) * sp.row, dc = (v.c - u.c) * sp.col;
            best = std::min(best, std::sqrt(ds * ds + dr * dr + dc * dc));
        }
        return best;
    };
    double total = 0.0;
    for (const auto& v : a) total += nearest(v, b);
    for (const auto& v : b) total += nearest(v, a);
    return total / static_cast<double>(a.size() + b.size());
}

// Exhaustive two-sided p-value over every split of the pooled midranks.
double mwu_enumeration(const std::vector<double>& a, const std::vector<double>& b, double& u_out) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const std::size_t n = a.size(), total = pooled.size();
    std::vector<double> rank(total);
    for (std::size_t i = 0; i < total; ++i) {
        double less = 0, equal = 0;
        for (double v : pooled) {
            less += v < pooled[i];
            equal += v == pooled[i];
        }
        rank[i] = less + (equal + 1.0) / 2.0;
    }
    double observed = 0;
    for (std::size_t i = 0; i < n; ++i) observed += rank[i];
    u_out = observed - static_cast<double>(n * (n + 1)) / 2.0;
    const double center = static_cast<double>(n) * static_cast<double>(total + 1) / 2.0;
    const double dev = std::abs(observed - center);
    double extreme = 0, count = 0;
    std::vector<std::size_t> idx(n);
    std::function<void(std::size_t, std::size_t, double)> rec = [&](std::size_t k, std::size_t start, double sum) {
        if (k == n) {
            count += 1;
            // Half-integer rank sums are exact in binary, so the comparison needs no slack.
            if (std::abs(sum - center) >= dev) extreme += 1;
            return;
        }
        for (std::size_t i = start; i + (n - k) <= total; ++i) rec(k + 1, i + 1, sum + rank[i]);
    };
    rec(0, 0, 0.0);
    return std::min(1.0, extreme / count);
}

Outcome metric_oracles() {
    std::mt19937_64 rng(17);
    const Spacing sp{1.0, 1.0, 3.0};
    std::size_t set_mismatch = 0;
    double worst_assd = 0.0, worst_identity = 0.0, worst_p = 0.0;
    std::size_t assd_undefined_mismatch = 0;
    for (int m = 0; m < kMetricMasks; ++m) {
        const LabelVolume p = random_mask(rng, 6, 8, 8), g = random_mask(rng, 6, 8, 8);
        for (std::uint8_t cls : {std::uint8_t{1}, std::uint8_t{2}}) {
            const auto ps = voxel_set(p, cls), gs = voxel_set(g, cls);
            std::vector<std::size_t> inter;
            std::set_intersection(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(inter));
            const double ni = static_cast<double>(inter.size()), np = static_cast<double>(ps.size()),
                         ng = static_cast<double>(gs.size());
            const double want_iou = np + ng - ni == 0 ? 1.0 : ni / (np + ng - ni);
            const double want_dice = np + ng == 0 ? 1.0 : 2.0 * ni / (np + ng);
            const std::optional<double> want_ravd =
                gs.empty() ? std::nullopt : std::optional<double>(100.0 * std::abs(np - ng) / ng);
            const double got_iou = iou(p, g, cls), got_dice = dice(p, g, cls);
            set_mismatch += got_iou != want_iou;
            set_mismatch += got_dice != want_dice;
            set_mismatch += ravd(p, g, cls) != want_ravd;
            worst_identity = std::max(worst_identity, std::abs(got_dice - 2.0 * got_iou / (1.0 + got_iou)));

            const auto want_assd = assd_oracle(p, g, cls, sp);
            const auto got_assd = assd(p, g, cls, sp);
            if (want_assd.has_value() != got_assd.has_value()) {
                ++assd_undefined_mismatch;
            } else if (want_assd) {
                worst_assd = std::max(worst_assd, std::abs(*want_assd - *got_assd));
            }
        }
    }
    // Mann-Whitney on tie-heavy samples with n·m <= 64.
    std::size_t mwu_cases = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 64 / n)(rng);
        std::uniform_int_distribution<int> val(0, t % 2 == 0 ? 5 : 1000);
        std::vector<double> a(n), b(m);
        for (auto& v : a) v = val(rng);
        for (auto& v : b) v = val(rng) + (t % 3 == 0 ? 2 : 0);
        double want_u = 0;
        const double want_p = mwu_enumeration(a, b, want_u);
        const auto got = mann_whitney_u(a, b);
        worst_p = std::max({worst_p, std::abs(got.p - want_p), std::abs(got.u - want_u), got.exact ? 0.0 : 1.0});
        ++mwu_cases;
    }
    const bool pass = set_mismatch == 0 && assd_undefined_mismatch == 0 && worst_assd <= kAssdTolerance &&
                      worst_identity <= kIdentityTolerance && worst_p <= kMwuTolerance;
    return {pass, fmt("%d mask pairs x 2 zones: set mismatches %zu, assd %.1e (<= %.0e), dice/iou identity %.1e; "
                      "%zu exact U tests %.1e",
                      kMetricMasks, set_mismatch + assd_undefined_mismatch, worst_assd, kAssdTolerance,
                      worst_identity, mwu_cases, worst_p)};
}

DatasetOptions tiny_dataset() {
    DatasetOptions o;
    auto& s = o.phantom;
    s.patients = 4;
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

TrainConfig tiny_config(const fs::path& manifest, const fs::path& out, Precision precision) {
    TrainConfig c;
    auto& n = c.network;
    n.scales = 2;
    n.filters = {4, 8, 16};
    n.slices = 9;
    n.height = 32;
    n.width = 32;
    n.blocks = 1;
    n.heads = 2;
    n.cat_layers = {0, 1, 2};
    c.epochs = 4;
    c.lr = 1e-3;
    c.batch = 2;
    c.seed = 5;
    c.precision = precision;
    c.data = manifest;
    c.output = out;
    return c;
}

std::string file_text(const fs::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

template <typename T>
bool same_state(const fs::path& a, const fs::path& b) {
    auto sa = load_checkpoint<T>(a);
    auto sb = load_checkpoint<T>(b);
    auto pa = named_parameters(sa.net), pb = named_parameters(sb.net);
    if (pa.size() != pb.size() || sa.rng_state != sb.rng_state || sa.epoch != sb.epoch) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].tensor->values() != pb[i].tensor->values()) return false;
        if (sa.optimizer[i].m != sb.optimizer[i].m || sa.optimizer[i].v != sb.optimizer[i].v) return false;
        if (sa.optimizer[i].step != sb.optimizer[i].step) return false;
    }
    return true;
}

Outcome determinism(const fs::path& work) {
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    std::vector<std::string> broken;

    // Dataset generation is a pure function of its options.
    generate_dataset(tiny_dataset(), root / "data_a");
    generate_dataset(tiny_dataset(), root / "data_b");
    for (const auto& e : fs::directory_iterator(root / "data_a")) {
        if (read_file(e.path()) != read_file(root / "data_b" / e.path().filename())) broken.push_back("dataset bytes");
    }
    const fs::path manifest = root / "data_a" / "manifest.json";

    // Volume round trip: decode then re-encode reproduces the file, values survive bit-exactly.
    const Manifest m = load_manifest(manifest);
    const auto& entry = m.patients.front();
    const Volume vol = load_volume(entry.image, entry.spacing);
    const LabelVolume lab = load_labels(entry.labels);
    save_volume(root / "vol.catv", vol);
    save_volume(root / "lab.catv", lab);
    if (read_file(root / "vol.catv") != read_file(entry.image)) broken.push_back("volume bytes");
    if (read_file(root / "lab.catv") != read_file(entry.labels)) broken.push_back("label bytes");
    if (load_volume(root / "vol.catv").intensities.values() != vol.intensities.values()) broken.push_back("volume values");
    if (!(load_labels(root / "lab.catv") == lab)) broken.push_back("label values");

    for (Precision prec : {Precision::f32, Precision::f64}) {
        const std::string tag = prec == Precision::f32 ? "f32" : "f64";
        const fs::path a = root / (tag + "_a"), b = root / (tag + "_b"), r = root / (tag + "_resumed");
        TrainOptions quiet;
        quiet.quiet = true;
        train(tiny_config(manifest, a, prec), quiet);
        train(tiny_config(manifest, b, prec), quiet);
        if (file_text(a / "train_log.csv") != file_text(b / "train_log.csv")) broken.push_back(tag + " log");
        const bool same = prec == Precision::f32 ? same_state<float>(a / "last.ckpt", b / "last.ckpt")
                                                 : same_state<double>(a / "last.ckpt", b / "last.ckpt");
        if (!same) broken.push_back(tag + " repeat state");

        // Interrupt after 2 of 4 epochs, then resume.
        auto half = tiny_config(manifest, r, prec);
        half.epochs = 2;
        train(half, quiet);
        TrainOptions resume = quiet;
        resume.resume = r / "last.ckpt";
        train(tiny_config(manifest, r, prec), resume);
        if (file_text(a / "train_log.csv") != file_text(r / "train_log.csv")) broken.push_back(tag + " resumed log");
        const bool resumed = prec == Precision::f32 ? same_state<float>(a / "last.ckpt", r / "last.ckpt")
                                                    : same_state<double>(a / "last.ckpt", r / "last.ckpt");
        if (!resumed) broken.push_back(tag + " resumed state");

        // Checkpoint round trip: load then save reproduces the bytes.
        if (prec == Precision::f32) {
            auto s = load_checkpoint<float>(a / "last.ckpt");
            save_checkpoint(root / "copy.ckpt", s);
        } else {
            auto s = load_checkpoint<double>(a / "last.ckpt");
            save_checkpoint(root / "copy.ckpt", s);
        }
        if (read_file(root / "copy.ckpt") != read_file(a / "last.ckpt")) broken.push_back(tag + " checkpoint bytes");
    }
    std::string detail = "dataset, volume, checkpoint bytes; f32/f64 repeat and 2+2 resume vs 4 epochs";
    if (!broken.empty()) {
        detail += "; differs:";
        for (const auto& s : broken) detail += " " + s;
    }
    fs::remove_all(root);
    return {broken.empty(), detail};
}

// ---------------------------------------------------------- behavioral suite

struct BehavioralOptions {
    fs::path work;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::size_t epochs = 40;
    double lr = 1e-3;
    bool reuse = false;
};

struct RunOutcome {
    MetricsReport test;
    double seconds = 0.0;
};

RunOutcome run_variant(const BehavioralOptions& opt, const fs::path& manifest, std::uint64_t seed, bool cat) {
    const fs::path out = opt.work / ((cat ? "cat_s" : "base_s") + std::to_string(seed));
    RunOutcome r;
    const fs::path timing = out / "seconds.txt";
    bool done = false;
    if (opt.reuse && fs::exists(out / "last.ckpt") && fs::exists(timing)) {
        done = load_checkpoint<float>(out / "last.ckpt").epoch == opt.epochs;
    }
    if (done) {
        r.seconds = std::stod(file_text(timing));
    } else {
        fs::remove_all(out);
        TrainConfig c;
        if (!cat) c.network.cat_layers.clear();
        c.epochs = opt.epochs;
        c.lr = opt.lr;
        c.seed = seed;
        c.data = manifest;
        c.output = out;
        TrainOptions quiet;
        quiet.quiet = true;
        const auto t0 = Clock::now();
        train(c, quiet);
        r.seconds = seconds_since(t0);
        const auto text = fmt("%.3f", r.seconds);
        write_file(timing, std::vector<std::uint8_t>(text.begin(), text.end()));
    }
    r.test = evaluate(out / "best.ckpt", "test");
    const std::string json = report_to_json(r.test);
    write_file(out / "test_metrics.json", std::vector<std::uint8_t>(json.begin(), json.end()));
    std::printf("      %-5s seed %llu: TZ %.4f  PZ %.4f  (%.0f s)\n", cat ? "cat" : "base",
                static_cast<unsigned long long>(seed), r.test.aggregate(Metric::dice, kTransitionZone).mean,
                r.test.aggregate(Metric::dice, kPeripheralZone).mean, r.seconds);
    std::fflush(stdout);
    return r;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

void behavioral_suite(const BehavioralOptions& opt) {
    fs::create_directories(opt.work);
    DatasetOptions data;  // default phantom: 60/10/10 patients, ambiguity 0.5, seed 7
    const fs::path manifest = opt.work / "data" / "manifest.json";
    if (!opt.reuse || !fs::exists(manifest)) generate_dataset(data, opt.work / "data");
    std::printf("      %zu seeds x {cat, base}, %zu epochs, lr %g, data %s\n", opt.seeds.size(), opt.epochs, opt.lr,
                manifest.string().c_str());

    std::vector<RunOutcome> cats, bases;
    try {
        for (auto seed : opt.seeds) {
            cats.push_back(run_variant(opt, manifest, seed, true));
            bases.push_back(run_variant(opt, manifest, seed, false));
        }
    } catch (const std::exception& e) {
        for (const char* name : {"behavioral cat dice", "behavioral pz gain", "behavioral runtime", "part-split ordering"})
            report(name, {false, std::string("error: ") + e.what()});
        return;
    }

    const auto per_seed = [](const std::vector<RunOutcome>& runs, std::uint8_t zone, Part part = Part::whole) {
        std::vector<double> v;
        for (const auto& r : runs) v.push_back(r.test.aggregate(Metric::dice, zone, part).mean);
        return v;
    };

    const auto cat_tz = per_seed(cats, kTransitionZone), cat_pz = per_seed(cats, kPeripheralZone);
    const double min_cat = std::min(*std::min_element(cat_tz.begin(), cat_tz.end()),
                                    *std::min_element(cat_pz.begin(), cat_pz.end()));
    report("behavioral cat dice",
           {mean(cat_tz) >= kCatDiceFloor && mean(cat_pz) >= kCatDiceFloor,
            fmt("CAT test Dice over seeds: TZ %.4f, PZ %.4f (>= %.2f); worst single run %.4f", mean(cat_tz),
                mean(cat_pz), kCatDiceFloor, min_cat)});

    const auto base_pz = per_seed(bases, kPeripheralZone);
    const double gain = mean(cat_pz) - mean(base_pz);
    const auto test = mann_whitney_u(cat_pz, base_pz);
    report("behavioral pz gain", {gain >= kPzGainFloor && test.p < kPzGainAlpha,
                                  fmt("PZ Dice CAT %.4f vs baseline %.4f: gain %+.4f (>= %.2f), U %.1f, p %.4f (< %.1f)",
                                      mean(cat_pz), mean(base_pz), gain, kPzGainFloor, test.u, test.p, kPzGainAlpha)});

    double slowest = 0.0;
    for (const auto* runs : {&cats, &bases})
        for (const auto& r : *runs) slowest = std::max(slowest, r.seconds);
    report("behavioral runtime", {slowest < kRunBudgetSeconds,
                                  fmt("slowest training run %.0f s (< %.0f s)", slowest, kRunBudgetSeconds)});

    // Baseline apex and base below mid-gland, per zone, averaged over seeds.
    bool ordered = true;
    std::string detail = "baseline Dice apex/mid/base:";
    for (std::uint8_t zone : {kTransitionZone, kPeripheralZone}) {
        const double apex = mean(per_seed(bases, zone, Part::apex));
        const double mid = mean(per_seed(bases, zone, Part::mid));
        const double base = mean(per_seed(bases, zone, Part::base));
        const double gap = std::min(mid - apex, mid - base);
        ordered = ordered && gap >= kPartGapFloor;
        detail += fmt(" %s %.4f/%.4f/%.4f gap %.4f;", zone_name(zone), apex, mid, base, gap);
    }
    report("part-split ordering", {ordered, detail + fmt(" (gap >= %.3f)", kPartGapFloor)});
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks; prints one PASS/FAIL line per criterion"};
    std::string suite = "all";
    BehavioralOptions behavioral;
    std::string work = (fs::temp_directory_path() / "catnet_acceptance").string();
    app.add_option("--suite", suite, "fast, behavioral or all")->check(CLI::IsMember({"fast", "behavioral", "all"}));
    app.add_option("--work", work, "Scratch directory for datasets and runs");
    app.add_option("--seeds", behavioral.seeds, "Training seeds for the behavioral comparison");
    app.add_option("--epochs", behavioral.epochs, "Epochs per behavioral run");
    app.add_option("--lr", behavioral.lr, "Learning rate for behavioral runs");
    app.add_flag("--reuse", behavioral.reuse, "Keep finished behavioral runs from an earlier invocation");
    CLI11_PARSE(app, argc, argv);
    behavioral.work = fs::path(work) / "behavioral";

    if (suite != "behavioral") {
        run_criterion("gradient suite", gradient_suite);
        run_criterion("attention invariants", attention_invariants);
        run_criterion("positional encoding", positional_encoding);
        run_criterion("scalar attention oracle", scalar_oracle);
        run_criterion("metric oracles", metric_oracles);
        run_criterion("determinism and round trips", [&] { return determinism(work); });
    }
    if (suite != "fast") behavioral_suite(behavioral);
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
