#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"
#include "catnet/volume_io.hpp"

using namespace catnet;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Thrown by subcommands that ran to completion but found a failed check.
struct CheckFailed {};

std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void print_summary(const MetricsReport& report) {
    std::printf("%-4s %-6s %-5s %10s %10s %6s\n", "zone", "part", "metric", "mean", "std", "n");
    for (std::uint8_t zone : {kTransitionZone, kPeripheralZone}) {
        for (Part part : kParts) {
            for (Metric m : {Metric::dice, Metric::iou, Metric::ravd, Metric::assd}) {
                const auto a = report.aggregate(m, zone, part);
                std::printf("%-4s %-6s %-5s %10.4f %10.4f %6zu\n", zone_name(zone), part_name(part), metric_name(m),
                            a.mean, a.std, a.count);
            }
        }
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-slice attention segmentation toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    DatasetOptions gen_opts;
    std::filesystem::path gen_out;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", gen_opts.phantom.seed, "Phantom seed");
    gen->add_option("--patients", gen_opts.phantom.patients, "Number of patients");
    gen->add_option("--slices", gen_opts.phantom.slices, "Slices per volume");
    gen->add_option("--height", gen_opts.phantom.height, "Slice height");
    gen->add_option("--width", gen_opts.phantom.width, "Slice width");
    gen->add_option("--noise", gen_opts.phantom.noise, "Gaussian noise sigma");
    gen->add_option("--texture", gen_opts.phantom.texture, "Std of the per-slice smooth texture field");
    gen->add_option("--ambiguity", gen_opts.phantom.ambiguity, "Contrast loss on apex and base slices, in [0, 1]");
    gen->add_option("--split-seed", gen_opts.split_seed, "Seed of the train/val/test shuffle");
    gen->add_option("--ratios", gen_opts.ratios, "Train, val and test fractions")->expected(3);

    // train
    auto* tr = app.add_subcommand("train", "Train a network");
    std::filesystem::path config_path;
    std::optional<std::filesystem::path> resume, data, output;
    std::optional<std::size_t> epochs, batch, blocks, heads, pool;
    std::optional<double> lr, weight_decay;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> precision;
    std::optional<std::vector<std::size_t>> cat_layers;
    std::optional<bool> pe, transformer;
    bool no_cat = false, quiet = false;
    tr->add_option("--config", config_path, "JSON config file")->required();
    tr->add_option("--resume", resume, "Continue from this checkpoint");
    tr->add_option("--data", data, "Dataset manifest");
    tr->add_option("--output", output, "Run directory");
    tr->add_option("--epochs", epochs);
    tr->add_option("--lr", lr);
    tr->add_option("--weight-decay", weight_decay);
    tr->add_option("--batch", batch, "Volumes per optimizer step");
    tr->add_option("--seed", seed);
    tr->add_option("--precision", precision)->check(CLI::IsMember({"f32", "f64"}));
    tr->add_option("--blocks", blocks, "Transformer blocks per CAT module");
    tr->add_option("--heads", heads, "Attention heads");
    tr->add_option("--pool", pool, "Query/key pooling size");
    tr->add_option("--cat-layers", cat_layers, "Scales carrying a CAT module");
    tr->add_flag("--no-cat", no_cat, "Disable every CAT module (baseline)");
    tr->add_option("--pe", pe, "Enable the slice encoding (true/false)");
    tr->add_option("--transformer", transformer, "Enable the transformer blocks (true/false)");
    tr->add_flag("--quiet", quiet, "Suppress per-epoch progress");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::filesystem::path eval_ckpt, eval_out;
    std::string eval_split = "test";
    std::optional<std::filesystem::path> eval_data;
    ev->add_option("--checkpoint", eval_ckpt)->required();
    ev->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--out", eval_out, "Report JSON path")->required();
    ev->add_option("--data", eval_data, "Dataset manifest (default: the one in the checkpoint)");

    // export-attention
    auto* ex = app.add_subcommand("export-attention", "Write attention matrices of one volume as CSV and PGM");
    std::filesystem::path ex_ckpt, ex_volume, ex_out;
    ex->add_option("--checkpoint", ex_ckpt)->required();
    ex->add_option("--volume", ex_volume, "CATV image volume")->required();
    ex->add_option("--out", ex_out, "Output directory")->required();

    // compare
    auto* cmp = app.add_subcommand("compare", "Mann-Whitney U comparison of two metric reports");
    std::filesystem::path cmp_a, cmp_b;
    std::string cmp_part = "whole";
    cmp->add_option("--a", cmp_a, "First report JSON")->required();
    cmp->add_option("--b", cmp_b, "Second report JSON")->required();
    cmp->add_option("--part", cmp_part)->check(CLI::IsMember({"whole", "apex", "mid", "base"}));

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    std::uint64_t gc_seed = 1;
    gc->add_option("--seed", gc_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (*gen) {
            const auto m = generate_dataset(gen_opts, gen_out);
            std::printf("wrote %zu patients to %s\n", m.patients.size(), gen_out.string().c_str());
        } else if (*tr) {
            TrainConfig config = load_config(config_path);
            if (data) config.data = *data;
            if (output) config.output = *output;
            if (epochs) config.epochs = *epochs;
            if (lr) config.lr = *lr;
            if (weight_decay) config.weight_decay = *weight_decay;
            if (batch) config.batch = *batch;
            if (seed) config.seed = *seed;
            if (precision) config.precision = *precision == "f32" ? Precision::f32 : Precision::f64;
            if (blocks) config.network.blocks = *blocks;
            if (heads) config.network.heads = *heads;
            if (pool) config.network.pool = *pool;
            if (cat_layers) config.network.cat_layers = *cat_layers;
            if (no_cat) config.network.cat_layers.clear();
            if (pe) config.network.pe_enabled = *pe;
            if (transformer) config.network.transformer_enabled = *transformer;
            TrainOptions opts;
            opts.resume = resume;
            opts.quiet = quiet;
            const auto result = train(config, opts);
            std::printf("best epoch %zu, validation Dice %.4f\nlast checkpoint %s\nbest checkpoint %s\n",
                        result.best_epoch, result.best_val, result.last_checkpoint.string().c_str(),
                        result.best_checkpoint.string().c_str());
        } else if (*ev) {
            const auto report = evaluate(eval_ckpt, eval_split, eval_data);
            write_text(eval_out, report_to_json(report));
            print_summary(report);
        } else if (*ex) {
            const auto files = export_attention(ex_ckpt, ex_volume, ex_out);
            std::printf("wrote %zu files to %s\n", files.size(), ex_out.string().c_str());
        } else if (*cmp) {
            const auto a = report_from_json(read_text(cmp_a));
            const auto b = report_from_json(read_text(cmp_b));
            Part part = Part::whole;
            for (Part p : kParts) {
                if (cmp_part == part_name(p)) part = p;
            }
            std::fputs(render_comparison(compare_all(a, b, part)).c_str(), stdout);
        } else if (*gc) {
            bool ok = true;
            for (const auto& e : run_gradient_suite(gc_seed)) {
                std::printf("%-42s max rel error %.3e  %s\n", e.name.c_str(), e.max_rel_error,
                            e.passed ? "ok" : "FAIL");
                ok = ok && e.passed;
            }
            if (!ok) throw CheckFailed{};
        }
    } catch (const CheckFailed&) {
        std::fprintf(stderr, "error: gradient check failed (tolerance %.0e)\n", kGradSuiteTolerance);
        return kExitValidation;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return 0;
}
