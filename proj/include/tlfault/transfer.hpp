#pragma once

#include <map>
#include <string>
#include <vector>

#include "tlfault/featurex.hpp"
#include "tlfault/neuralnet.hpp"
#include "tlfault/stats.hpp"

namespace tlfault::transfer {

enum class Mode { FineTune, NoFineTune, Dedicated };

inline constexpr std::array<Mode, 3> kAllModes{Mode::FineTune, Mode::NoFineTune, Mode::Dedicated};

/// CLI spellings: "finetune", "frozen", "dedicated".
std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);

struct TransferPlan {
    double source_length = 100.0;
    std::vector<double> target_lengths{12.5, 25, 50, 200, 400, 800};
    std::vector<Mode> modes{kAllModes.begin(), kAllModes.end()};
    neuralnet::Task task = neuralnet::Task::Classify;
    neuralnet::TrainConfig config = neuralnet::TrainConfig::classification();

    void validate() const;
};

struct TargetOutcome {
    double length = 0.0;
    Mode mode = Mode::Dedicated;
    neuralnet::Metrics metrics;
    neuralnet::TrainHistory history;
    double seconds = 0.0;
};

struct TransferResult {
    neuralnet::Task task = neuralnet::Task::Classify;
    std::uint64_t seed = 0;
    std::vector<TargetOutcome> outcomes;  // target-major, modes in plan order

    const TargetOutcome* find(double length, Mode mode) const;
};

/// Trains a classifier (or regressor) from scratch on the source dataset. No parameter is
/// left frozen in the returned archive.
neuralnet::WeightArchive pretrain_source(const featurex::FeatureDataset& source, neuralnet::Task task,
                                         const neuralnet::TrainConfig& cfg,
                                         neuralnet::TrainResult* result = nullptr);

/// Builds the target network for a mode:
///   FineTune    C1..S4 frozen at source weights; F5, F6 (and the head when the tasks match)
///               start from the source and stay trainable.
///   NoFineTune  C1..F6 frozen at source weights; fresh trainable head.
///   Dedicated   nothing loaded; every layer fresh and trainable.
/// Fresh layers are drawn from `seed`. The source archive may come from a classifier even
/// when `task` is Locate; only the head differs in shape.
neuralnet::Network apply_freeze(const neuralnet::WeightArchive& source, Mode mode, neuralnet::Task task,
                                std::uint64_t seed);

/// Runs every (target, mode) pair of the plan. Location runs drop no-fault samples.
/// Training seeds come from plan.config.seed.
TransferResult adapt(const TransferPlan& plan, const neuralnet::WeightArchive& source,
                     const std::map<double, featurex::FeatureDataset>& datasets);

/// One aggregated table row over statistical repeats.
struct SuiteRow {
    double length = 0.0;
    Mode mode = Mode::Dedicated;
    StatSummary accuracy, precision, recall, f1, mse;
    StatSummary seconds;
    StatSummary time_ratio;  // this mode's time over DEDICATED on the same repeat; empty if unknown
    std::vector<std::uint64_t> seeds;
};

/// Rows ordered by length, then by mode in kAllModes order. Every repeat must cover the same
/// (length, mode) set.
std::vector<SuiteRow> transfer_suite_report(const std::vector<TransferResult>& repeats);

} // namespace tlfault::transfer
