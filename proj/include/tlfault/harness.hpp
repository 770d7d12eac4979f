#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tlfault/baselines.hpp"
#include "tlfault/featurex.hpp"
#include "tlfault/neuralnet.hpp"
#include "tlfault/powersim.hpp"
#include "tlfault/stats.hpp"
#include "tlfault/transfer.hpp"

namespace tlfault::harness {

/// Pipeline stages, in execution order. The index offsets the master seed.
enum class Stage { Simulate, Features, Pretrain, TransferClassify, TransferLocate, KMeans, Latency, Report };

std::string_view to_string(Stage s);

/// splitmix64 of (master + stage) mixed with `sub`; stable across platforms.
std::uint64_t derive_seed(std::uint64_t master, Stage stage, std::uint64_t sub = 0);

struct ExperimentConfig {
    std::vector<double> lengths{powersim::kSupportedLengths.begin(), powersim::kSupportedLengths.end()};
    double source_length = 100.0;
    powersim::GridAxes grid = powersim::GridAxes::full();
    double split_ratio = 0.7;
    neuralnet::TrainConfig classify = neuralnet::TrainConfig::classification();
    neuralnet::TrainConfig locate = neuralnet::TrainConfig::location();
    std::vector<transfer::Mode> modes{transfer::kAllModes.begin(), transfer::kAllModes.end()};
    std::vector<neuralnet::Task> tasks{neuralnet::Task::Classify, neuralnet::Task::Locate};
    int repeats = 30;
    int kmeans_repeats = 30;
    std::size_t kmeans_k = 11;
    std::size_t latency_inferences = 10000;
    std::uint64_t master_seed = 0;
    std::filesystem::path output_dir = "runs/default";
    unsigned threads = 1;
    bool strict_timing = false;

    void validate() const;
    std::vector<double> target_lengths() const;  // lengths without the source
};

/// JSON keys mirror the struct fields. "grid" is "reduced", "full" or an object of axes;
/// training blocks accept epochs, learning_rate, batch_size, beta1, beta2, epsilon.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// "reduced", "full" or a path to a JSON object of grid axes.
powersim::GridAxes grid_from_spec(const std::string& name_or_path);

// ---------------------------------------------------------------------------
// Statistics and measurement

/// Runs `closure(seed)` for seeds master+1 .. master+repeats and aggregates each named metric.
/// A throwing repeat aborts with a StageError naming the repeat index.
std::map<std::string, StatSummary> statistical_repeat(
    const std::function<std::map<std::string, double>(std::uint64_t)>& closure, int repeats, std::uint64_t master);

struct LatencyStats {
    double mean_us = 0.0;
    double p99_us = 0.0;
    std::size_t inferences = 0;
};

/// Per-sample forward-pass wall clock after a short warm-up, cycling through `samples`.
LatencyStats measure_inference_latency(const neuralnet::Network& net, std::span<const featurex::Sample> samples,
                                       std::size_t inferences = 10000);

// ---------------------------------------------------------------------------
// Results

/// One training run. `seconds` is kept out of the deterministic results file.
struct RunRecord {
    neuralnet::Task task = neuralnet::Task::Classify;
    double length = 0.0;
    transfer::Mode mode = transfer::Mode::Dedicated;
    std::uint64_t seed = 0;
    double accuracy = 0.0, fraction_correct = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0, mse = 0.0;
    neuralnet::TrainHistory history;
    double seconds = 0.0;
};

struct KMeansRecord {
    double length = 0.0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double fraction_correct = 0.0;
    int iterations = 0;
    double inertia = 0.0;
};

struct LatencyRecord {
    neuralnet::Task task = neuralnet::Task::Classify;
    LatencyStats stats;
};

struct PipelineResults {
    ExperimentConfig config;
    std::vector<RunRecord> runs;
    std::vector<KMeansRecord> kmeans;
    std::vector<LatencyRecord> latency;

    /// Groups runs of one task into per-seed transfer results.
    std::vector<transfer::TransferResult> transfer_results(neuralnet::Task task) const;
};

/// results.json holds everything except wall-clock values, which go to timing.json.
void save_results(const std::filesystem::path& dir, const PipelineResults& r);
PipelineResults load_results(const std::filesystem::path& dir);

struct KMeansRow {
    double length = 0.0;
    StatSummary accuracy;
    StatSummary fraction_correct;
    StatSummary iterations;
    int min_iterations = 0, max_iterations = 0;
    std::vector<std::uint64_t> seeds;
};

std::vector<KMeansRow> kmeans_table(const std::vector<KMeansRecord>& records);

struct ReportBundle {
    std::vector<transfer::SuiteRow> classification;
    std::vector<transfer::SuiteRow> location;
    std::vector<KMeansRow> kmeans;
    std::vector<LatencyRecord> latency;
    std::vector<std::filesystem::path> files;
};

/// Writes CSV tables, the Markdown summary and plot data for `results` into `dir`.
/// Timing columns go to separate timing_*.csv / timing.md files.
ReportBundle write_reports(const std::filesystem::path& dir, const PipelineResults& results);

struct CurveSet {
    std::string tag;  // "<task>_<mode>_L<length>"
    neuralnet::TrainHistory history;
};

/// Two-column (epoch, value) curve files, bar data per length and mode, and plots.gp.
std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& dir, const std::vector<CurveSet>& curves,
                                                  const std::vector<transfer::SuiteRow>& classification,
                                                  const std::vector<transfer::SuiteRow>& location);

/// Curves averaged over repeats, one set per (task, length, mode).
std::vector<CurveSet> mean_curves(const std::vector<RunRecord>& runs);

// ---------------------------------------------------------------------------
// Stage artifacts

std::string length_tag(double length);  // 12.5 -> "12.5", 100 -> "100"

/// Simulated waveforms for one length, reused from `dir` when the stored stage key and
/// content checksum both match.
std::vector<powersim::WaveformRecord> simulate_stage(const ExperimentConfig& cfg, double length,
                                                     const std::filesystem::path& dir, bool* reused = nullptr);
featurex::FeatureDataset features_stage(const ExperimentConfig& cfg, double length,
                                        const std::vector<powersim::WaveformRecord>& records,
                                        const std::filesystem::path& dir, bool* reused = nullptr);

/// simulate -> features -> pretrain -> adapt (all modes, both tasks) -> kmeans -> latency -> reports.
ReportBundle run_pipeline(const ExperimentConfig& cfg);

} // namespace tlfault::harness
