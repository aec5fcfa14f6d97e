#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"
#include "catnet/volume_io.hpp"

namespace catnet {

namespace {

// The tape allocates and frees many large buffers per step; keeping them out of
// mmap and off the trim path avoids repeated page faults.
void tune_allocator() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 32 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)once;
#endif
}

struct Sample {
    std::string id;
    Tensor<float> image;
    LabelVolume labels;
    Spacing spacing;
};

void check_sample_shape(const Sample& s, const NetworkConfig& net) {
    const Shape want{net.slices, net.height, net.width, net.in_channels};
    if (s.image.shape() != want) {
        throw DataError("patient " + s.id + ": image shape " + shape_str(s.image.shape()) + " does not match network " +
                        shape_str(want));
    }
    if (s.labels.slices != net.slices || s.labels.height != net.height || s.labels.width != net.width) {
        throw DataError("patient " + s.id + ": label shape " + shape_str(s.labels) + " does not match the image");
    }
}

std::vector<Sample> load_split(const Manifest& manifest, const std::string& split, const NetworkConfig& net) {
    std::vector<Sample> out;
    for (const ManifestEntry* e : manifest.split(split)) {
        Sample s;
        s.id = e->id;
        s.spacing = e->spacing;
        try {
            s.image = load_volume(e->image, e->spacing).intensities;
            s.labels = load_labels(e->labels);
        } catch (const Error& err) {
            throw DataError("patient " + e->id + ": " + err.what());
        }
        check_sample_shape(s, net);
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
Tensor<T> as(const Tensor<float>& t) {
    if constexpr (std::is_same_v<T, float>) {
        return t;
    } else {
        return t.template cast<T>();
    }
}

std::string format_log_row(const EpochLog& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", e.epoch, e.train_loss, e.val_dice_tz, e.val_dice_pz,
                  e.val_dice_mean());
    return buf;
}

constexpr const char* kLogHeader = "epoch,train_loss,val_dice_tz,val_dice_pz,val_dice_mean";

// Rows of an existing log up to and including `epoch`, so a resumed run
// produces the same file as an uninterrupted one.
std::vector<std::string> kept_log_rows(const std::filesystem::path& path, std::size_t epoch) {
    std::vector<std::string> rows;
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) return rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) <= epoch) rows.push_back(line);
    }
    return rows;
}

bool same_network(const NetworkConfig& a, const NetworkConfig& b) {
    TrainConfig x, y;
    x.network = a;
    y.network = b;
    return config_to_json(x) == config_to_json(y);
}

template <typename T>
std::pair<double, double> validation_dice(SegNet<T>& net, const std::vector<Sample>& val) {
    if (val.empty()) return {0.0, 0.0};
    double tz = 0.0, pz = 0.0;
    for (const auto& s : val) {
        const LabelVolume pred = predict_mask(infer_logits(net, as<T>(s.image)));
        tz += dice(pred, s.labels, kTransitionZone);
        pz += dice(pred, s.labels, kPeripheralZone);
    }
    const double n = static_cast<double>(val.size());
    return {tz / n, pz / n};
}

template <typename T>
TrainResult train_impl(const TrainConfig& config, const TrainOptions& options) {
    tune_allocator();
    TrainState<T> state;
    if (options.resume) {
        state = load_checkpoint<T>(*options.resume);
        if (!same_network(state.config.network, config.network)) {
            throw ConfigError("network in " + options.resume->string() + " differs from the requested config");
        }
        if (state.config.seed != config.seed) {
            throw ConfigError("seed in " + options.resume->string() + " differs from the requested config");
        }
        state.config = config;
    } else {
        state = init_train_state<T>(config);
    }

    const Manifest manifest = load_manifest(config.data);
    const auto train_set = load_split(manifest, "train", config.network);
    const auto val_set = load_split(manifest, "val", config.network);
    if (train_set.empty()) throw DataError("manifest " + config.data.string() + " has no train patients");

    std::filesystem::create_directories(config.output);
    TrainResult result;
    result.last_checkpoint = config.output / "last.ckpt";
    result.best_checkpoint = config.output / "best.ckpt";
    const auto log_path = config.output / "train_log.csv";
    std::vector<std::string> log_rows = options.resume ? kept_log_rows(log_path, state.epoch) : std::vector<std::string>{};

    auto params = named_parameters(state.net);
    if (state.optimizer.size() != params.size()) throw UsageError("optimizer state does not match the parameters");
    AdamConfig adam;
    adam.lr = config.lr;
    adam.weight_decay = config.weight_decay;

    std::mt19937_64 rng;
    {
        std::istringstream is(state.rng_state);
        is >> rng;
        if (!is) throw FormatError("unreadable RNG state in checkpoint", 0);
    }

    auto step = [&](std::size_t accumulated) {
        const T inv = T{1} / static_cast<T>(accumulated);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i].tensor;
            auto& g = p.mutable_grad();
            if (accumulated > 1) {
                for (auto& v : g) v *= inv;
            }
            adam_step<T>(p.data(), g, state.optimizer[i], adam);
            p.zero_grad();
        }
    };

    for (std::size_t epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng() % i]);
        }

        for (auto& p : params) p.tensor->zero_grad();
        double loss_sum = 0.0;
        std::size_t pending = 0;
        for (std::size_t idx : order) {
            const Sample& s = train_set[idx];
            Tape<T> tape;
            auto fwd = catnet_forward(tape.constant(as<T>(s.image)), state.net);
            auto loss = cross_entropy(fwd.logits, s.labels.labels);
            loss_sum += static_cast<double>(loss.value()[0]);
            tape.backward(loss);
            if (++pending == config.batch) {
                step(pending);
                pending = 0;
            }
        }
        if (pending) step(pending);

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(train_set.size());
        std::tie(log.val_dice_tz, log.val_dice_pz) = validation_dice(state.net, val_set);

        std::ostringstream os;
        os << rng;
        state.rng_state = os.str();
        state.epoch = epoch;
        if (log.val_dice_mean() > state.best_val) {
            state.best_val = log.val_dice_mean();
            state.best_epoch = epoch;
            save_checkpoint(result.best_checkpoint, state);
        }
        save_checkpoint(result.last_checkpoint, state);

        log_rows.push_back(format_log_row(log));
        {
            std::ofstream out(log_path, std::ios::trunc);
            out << kLogHeader << '\n';
            for (const auto& r : log_rows) out << r << '\n';
            if (!out) throw DataError("cannot write " + log_path.string());
        }
        result.log.push_back(log);
        if (!options.quiet) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            std::fprintf(stderr, "epoch %zu/%zu  loss %.5f  val dice TZ %.4f PZ %.4f  (%.1f s)\n", epoch,
                         config.epochs, log.train_loss, log.val_dice_tz, log.val_dice_pz, secs);
        }
        if (options.on_epoch) options.on_epoch(log);
    }
    // A resume past the requested epoch count still leaves a usable last checkpoint.
    if (!std::filesystem::exists(result.last_checkpoint)) save_checkpoint(result.last_checkpoint, state);
    result.best_epoch = state.best_epoch;
    result.best_val = state.best_val;
    return result;
}

template <typename T>
std::vector<EvalCase> predict_split(const std::filesystem::path& checkpoint, const std::string& split,
                                    const std::optional<std::filesystem::path>& manifest_path) {
    tune_allocator();
    auto state = load_checkpoint<T>(checkpoint);
    const auto path = manifest_path.value_or(state.config.data);
    if (path.empty()) throw UsageError("checkpoint has no dataset path; pass a manifest");
    const Manifest manifest = load_manifest(path);
    std::vector<EvalCase> cases;
    for (auto& s : load_split(manifest, split, state.config.network)) {
        EvalCase c;
        c.id = s.id;
        c.pred = predict_mask(infer_logits(state.net, as<T>(s.image)));
        c.gt = std::move(s.labels);
        c.spacing = s.spacing;
        cases.push_back(std::move(c));
    }
    return cases;
}

template <typename T>
std::vector<std::filesystem::path> export_impl(const std::filesystem::path& checkpoint,
                                               const std::filesystem::path& volume,
                                               const std::filesystem::path& out_dir) {
    auto state = load_checkpoint<T>(checkpoint);
    Sample s;
    s.id = volume.filename().string();
    s.image = load_volume(volume).intensities;
    const auto& net = state.config.network;
    const Shape want{net.slices, net.height, net.width, net.in_channels};
    if (s.image.shape() != want) {
        throw DataError("volume " + volume.string() + " has shape " + shape_str(s.image.shape()) +
                        ", network expects " + shape_str(want));
    }
    std::vector<AttentionRecord<T>> records;
    infer_logits(state.net, as<T>(s.image), &records);
    return write_attention_records(records, out_dir);
}

} // namespace

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
    config.validate();
    if (config.data.empty()) throw UsageError("training needs a dataset manifest");
    if (config.output.empty()) throw UsageError("training needs an output directory");
    if (options.resume && checkpoint_precision(*options.resume) != config.precision) {
        throw ConfigError("checkpoint precision differs from the requested precision");
    }
    return config.precision == Precision::f32 ? train_impl<float>(config, options)
                                              : train_impl<double>(config, options);
}

MetricsReport evaluate_cases(const std::vector<EvalCase>& cases) {
    MetricsReport report;
    for (const auto& c : cases) report.patients.push_back(evaluate_patient(c.id, c.pred, c.gt, c.spacing));
    return report;
}

MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::string& split,
                       const std::optional<std::filesystem::path>& manifest) {
    if (split != "train" && split != "val" && split != "test") {
        throw UsageError("split must be train, val or test, got '" + split + "'");
    }
    const auto cases = checkpoint_precision(checkpoint) == Precision::f32
                           ? predict_split<float>(checkpoint, split, manifest)
                           : predict_split<double>(checkpoint, split, manifest);
    return evaluate_cases(cases);
}

template <typename T>
std::vector<std::filesystem::path> write_attention_records(const std::vector<AttentionRecord<T>>& records,
                                                           const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    for (const auto& r : records) {
        const std::size_t l = r.attention.dim(0);
        const std::string stem = "attn_s" + std::to_string(r.layer) + "_b" + std::to_string(r.block) + "_h" +
                                 std::to_string(r.head);
        std::string csv;
        char buf[32];
        for (std::size_t i = 0; i < l; ++i) {
            for (std::size_t j = 0; j < l; ++j) {
                std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.attention[i * l + j]));
                csv += buf;
                csv += j + 1 < l ? ',' : '\n';
            }
        }
        const auto csv_path = out_dir / (stem + ".csv");
        write_file(csv_path, std::vector<std::uint8_t>(csv.begin(), csv.end()));

        // Dark pixels mark strong attention; the matrix maximum maps to 0.
        T peak = T{0};
        for (T v : r.attention.values()) peak = std::max(peak, v);
        const std::string head = "P5\n" + std::to_string(l) + " " + std::to_string(l) + "\n255\n";
        std::vector<std::uint8_t> pgm(head.begin(), head.end());
        for (T v : r.attention.values()) {
            const double rel = peak > T{0} ? static_cast<double>(v / peak) : 0.0;
            pgm.push_back(static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::clamp(rel, 0.0, 1.0)))));
        }
        const auto pgm_path = out_dir / (stem + ".pgm");
        write_file(pgm_path, pgm);
        written.push_back(csv_path);
        written.push_back(pgm_path);
    }
    return written;
}

template std::vector<std::filesystem::path> write_attention_records<float>(const std::vector<AttentionRecord<float>>&,
                                                                           const std::filesystem::path&);
template std::vector<std::filesystem::path> write_attention_records<double>(
    const std::vector<AttentionRecord<double>>&, const std::filesystem::path&);

std::vector<std::filesystem::path> export_attention(const std::filesystem::path& checkpoint,
                                                    const std::filesystem::path& volume,
                                                    const std::filesystem::path& out_dir) {
    return checkpoint_precision(checkpoint) == Precision::f32 ? export_impl<float>(checkpoint, volume, out_dir)
                                                              : export_impl<double>(checkpoint, volume, out_dir);
}

} // namespace catnet
