#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "catnet/adam.hpp"
#include "catnet/dataset.hpp"
#include "catnet/metrics.hpp"
#include "catnet/segnet.hpp"

namespace catnet {

enum class Precision : std::uint8_t { f32, f64 };

struct TrainConfig {
    NetworkConfig network;
    std::size_t epochs = 150;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    std::size_t batch = 1;  // volumes per optimizer step (gradient accumulation)
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    std::filesystem::path data;    // dataset manifest
    std::filesystem::path output;  // run directory
    bool capture_attention = false;

    /// Throws ConfigError on invalid values.
    void validate() const;
};

/// JSON schema: every field optional, missing fields keep their defaults.
/// {"network": {"scales", "filters", "slices", "height", "width", "in_channels",
///              "blocks", "heads", "pool", "cat_layers", "pe", "transformer"},
///  "epochs", "lr", "weight_decay", "batch", "seed", "precision": "f32"|"f64",
///  "data", "output", "capture_attention"}
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& config);
/// Throws DataError when the file cannot be read.
TrainConfig load_config(const std::filesystem::path& path);

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_dice_tz = 0.0;
    double val_dice_pz = 0.0;
    double val_dice_mean() const { return 0.5 * (val_dice_tz + val_dice_pz); }
};

/// Complete resumable training state.
template <typename T>
struct TrainState {
    TrainConfig config;
    SegNet<T> net;
    std::vector<AdamState<T>> optimizer;  // aligned with named_parameters(net)
    std::size_t epoch = 0;                // completed epochs
    std::string rng_state;                // textual std::mt19937_64 state
    double best_val = -1.0;
    std::size_t best_epoch = 0;
};

template <typename T>
TrainState<T> init_train_state(const TrainConfig& config);

// Checkpoint: "CATC" | version u16 | header length u32 | JSON header | raw LE tensor payloads.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, TrainState<T>& state);
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path);
/// Reads only the header to report the stored precision.
Precision checkpoint_precision(const std::filesystem::path& path);

struct TrainOptions {
    std::optional<std::filesystem::path> resume;  // continue from this checkpoint
    bool quiet = false;
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochLog> log;  // epochs run in this call
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    std::filesystem::path last_checkpoint;
    std::filesystem::path best_checkpoint;
};

/// Seeded shuffled passes over the train split, cross-entropy, Adam; validation Dice per epoch.
/// Writes last.ckpt, best.ckpt and train_log.csv into config.output.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

struct EvalCase {
    std::string id;
    LabelVolume pred;
    LabelVolume gt;
    Spacing spacing;
};

MetricsReport evaluate_cases(const std::vector<EvalCase>& cases);

/// Runs the network on every patient of the split. manifest overrides the checkpoint's data path.
MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::string& split,
                       const std::optional<std::filesystem::path>& manifest = std::nullopt);

/// Writes attn_s{scale}_b{block}_h{head}.csv and .pgm per record; returns the written paths.
std::vector<std::filesystem::path> export_attention(const std::filesystem::path& checkpoint,
                                                    const std::filesystem::path& volume,
                                                    const std::filesystem::path& out_dir);
template <typename T>
std::vector<std::filesystem::path> write_attention_records(const std::vector<AttentionRecord<T>>& records,
                                                           const std::filesystem::path& out_dir);

struct ComparisonRow {
    std::string metric;
    std::string zone;
    double mean_a = 0.0;
    double mean_b = 0.0;
    UTestResult test;
    std::string stars;
};

/// "***" for p ≤ 0.01, "**" for p ≤ 0.05, "*" for p ≤ 0.1.
std::string significance_stars(double p);

/// Per-patient Mann-Whitney U between two reports on the same patient set.
ComparisonRow compare_runs(const MetricsReport& a, const MetricsReport& b, Metric metric, std::uint8_t zone,
                           Part part = Part::whole);
std::vector<ComparisonRow> compare_all(const MetricsReport& a, const MetricsReport& b, Part part = Part::whole);
std::string render_comparison(const std::vector<ComparisonRow>& rows);

struct GradSuiteEntry {
    std::string name;
    double max_rel_error = 0.0;
    bool passed = false;
};

inline constexpr double kGradSuiteTolerance = 1e-4;

/// Central finite-difference checks at 64-bit for every differentiable op and the
/// attention compositions, several random points each.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 1);

} // namespace catnet
