#include "tlfault/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tlfault/error.hpp"
#include "tlfault/powersim.hpp"

namespace tlfault::transfer {

using neuralnet::Network;
using neuralnet::NetSpec;
using neuralnet::Task;
using neuralnet::WeightArchive;

std::string_view to_string(Mode m) {
    switch (m) {
    case Mode::FineTune: return "finetune";
    case Mode::NoFineTune: return "frozen";
    case Mode::Dedicated: return "dedicated";
    }
    return "?";
}

Mode mode_from_string(std::string_view s) {
    for (Mode m : kAllModes)
        if (s == to_string(m)) return m;
    throw ValidationError("unknown transfer mode '" + std::string(s) + "' (finetune, frozen, dedicated)");
}

void TransferPlan::validate() const {
    if (!powersim::is_supported_length(source_length))
        throw ValidationError("unsupported source length " + std::to_string(source_length));
    if (target_lengths.empty()) throw ValidationError("transfer plan has no target lengths");
    for (double l : target_lengths) {
        if (!powersim::is_supported_length(l)) throw ValidationError("unsupported target length " + std::to_string(l));
        if (l == source_length) throw ValidationError("source length cannot also be a target");
    }
    if (modes.empty()) throw ValidationError("transfer plan has no modes");
    if ((task == Task::Classify) != (config.loss == neuralnet::LossKind::CrossEntropy))
        throw ValidationError("training loss does not match the task");
    config.validate();
}

const TargetOutcome* TransferResult::find(double length, Mode mode) const {
    for (const auto& o : outcomes)
        if (o.length == length && o.mode == mode) return &o;
    return nullptr;
}

namespace {

featurex::FeatureDataset for_task(const featurex::FeatureDataset& ds, Task task) {
    return task == Task::Locate ? featurex::faulted_only(ds) : ds;
}

} // namespace

WeightArchive pretrain_source(const featurex::FeatureDataset& source, Task task, const neuralnet::TrainConfig& cfg,
                              neuralnet::TrainResult* result) {
    const auto ds = for_task(source, task);
    Network net(NetSpec::lenet(task), cfg.seed);
    auto r = neuralnet::train(net, ds.train, ds.test, cfg);
    if (result) *result = std::move(r);
    net.freeze_all(false);
    return neuralnet::snapshot(net);
}

Network apply_freeze(const WeightArchive& source, Mode mode, Task task, std::uint64_t seed) {
    Network net(NetSpec::lenet(task), seed);
    if (mode == Mode::Dedicated) return net;

    std::vector<std::string> load{"C1", "C3", "F5", "F6"};
    const auto* head_w = source.find("head.weight");
    const auto& fresh_head = net.layer("head").params()[0];
    if (mode == Mode::FineTune && head_w && head_w->dims == fresh_head.dims) load.push_back("head");
    neuralnet::load_into(net, source, load);

    net.freeze_all(false);
    for (std::string_view name : neuralnet::kExtractorLayers) net.set_frozen(name, true);
    if (mode == Mode::NoFineTune) {
        net.set_frozen("F5", true);
        net.set_frozen("F6", true);
    }
    return net;
}

TransferResult adapt(const TransferPlan& plan, const WeightArchive& source,
                     const std::map<double, featurex::FeatureDataset>& datasets) {
    plan.validate();
    for (double l : plan.target_lengths)
        if (!datasets.contains(l)) throw ValidationError("no dataset for target length " + std::to_string(l));

    TransferResult result;
    result.task = plan.task;
    result.seed = plan.config.seed;
    for (double l : plan.target_lengths) {
        const auto ds = for_task(datasets.at(l), plan.task);
        for (Mode mode : plan.modes) {
            Network net = apply_freeze(source, mode, plan.task, plan.config.seed);
            auto r = neuralnet::train(net, ds.train, ds.test, plan.config);
            result.outcomes.push_back({l, mode, std::move(r.metrics), std::move(r.history), r.seconds});
        }
    }
    return result;
}

std::vector<SuiteRow> transfer_suite_report(const std::vector<TransferResult>& repeats) {
    std::vector<SuiteRow> rows;
    if (repeats.empty()) return rows;

    std::vector<std::pair<double, Mode>> keys;
    for (const auto& o : repeats.front().outcomes) keys.emplace_back(o.length, o.mode);
    std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return static_cast<int>(a.second) < static_cast<int>(b.second);
    });

    for (const auto& [length, mode] : keys) {
        std::vector<double> acc, prec, rec, f1, mse, secs, ratio;
        SuiteRow row;
        row.length = length;
        row.mode = mode;
        for (const auto& rep : repeats) {
            const TargetOutcome* o = rep.find(length, mode);
            if (!o) {
                std::ostringstream msg;
                msg << "repeat with seed " << rep.seed << " lacks length " << length << " mode " << to_string(mode);
                throw ValidationError(msg.str());
            }
            acc.push_back(o->metrics.accuracy);
            prec.push_back(o->metrics.precision);
            rec.push_back(o->metrics.recall);
            f1.push_back(o->metrics.f1);
            mse.push_back(o->metrics.mse);
            secs.push_back(o->seconds);
            if (const TargetOutcome* d = rep.find(length, Mode::Dedicated); d && d->seconds > 0.0)
                ratio.push_back(o->seconds / d->seconds);
            row.seeds.push_back(rep.seed);
        }
        row.accuracy = summarize(acc);
        row.precision = summarize(prec);
        row.recall = summarize(rec);
        row.f1 = summarize(f1);
        row.mse = summarize(mse);
        row.seconds = summarize(secs);
        row.time_ratio = summarize(ratio);
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace tlfault::transfer
