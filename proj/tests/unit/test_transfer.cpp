#include <doctest.h>

#include "fixtures.hpp"
#include "tlfault/error.hpp"
#include "tlfault/transfer.hpp"

using namespace tlfault;
using namespace tlfault::transfer;
using neuralnet::Network;
using neuralnet::Task;

namespace {

neuralnet::TrainConfig quick(Task task, std::uint64_t seed, int epochs = 3) {
    auto cfg = task == Task::Classify ? neuralnet::TrainConfig::classification(seed)
                                      : neuralnet::TrainConfig::location(seed);
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    return cfg;
}

const featurex::FeatureDataset& source_ds() {
    static const auto ds = fixture::tiny_dataset(100.0);
    return ds;
}

const neuralnet::WeightArchive& source_archive() {
    static const auto a = pretrain_source(source_ds(), Task::Classify, quick(Task::Classify, 1));
    return a;
}

std::vector<double> layer_values(const Network& net, std::string_view layer) {
    std::vector<double> v;
    for (const auto& p : net.layer(layer).params()) v.insert(v.end(), p.value.begin(), p.value.end());
    return v;
}

std::vector<double> archive_values(const neuralnet::WeightArchive& a, const std::string& layer) {
    std::vector<double> v;
    for (const char* suffix : {".weight", ".bias"}) {
        const auto* e = a.find(layer + suffix);
        REQUIRE(e);
        v.insert(v.end(), e->values.begin(), e->values.end());
    }
    return v;
}

} // namespace

TEST_CASE("pretrained archives leave nothing frozen") {
    for (const auto& e : source_archive().entries) CHECK_FALSE(e.frozen);
}

TEST_CASE("fine-tuning keeps the extractor and moves the dense layers") {
    const auto target = fixture::tiny_dataset(400.0);
    Network net = apply_freeze(source_archive(), Mode::FineTune, Task::Classify, 5);
    CHECK(layer_values(net, "head") == archive_values(source_archive(), "head"));
    neuralnet::train(net, target.train, target.test, quick(Task::Classify, 5));
    CHECK(layer_values(net, "C1") == archive_values(source_archive(), "C1"));
    CHECK(layer_values(net, "C3") == archive_values(source_archive(), "C3"));
    CHECK(layer_values(net, "F5") != archive_values(source_archive(), "F5"));
    CHECK(layer_values(net, "F6") != archive_values(source_archive(), "F6"));
}

TEST_CASE("frozen transfer trains only a fresh head") {
    const auto target = fixture::tiny_dataset(25.0);
    Network net = apply_freeze(source_archive(), Mode::NoFineTune, Task::Classify, 6);
    CHECK(layer_values(net, "head") != archive_values(source_archive(), "head"));
    const auto head_before = layer_values(net, "head");
    neuralnet::train(net, target.train, target.test, quick(Task::Classify, 6));
    for (const char* l : {"C1", "C3", "F5", "F6"}) CHECK(layer_values(net, l) == archive_values(source_archive(), l));
    CHECK(layer_values(net, "head") != head_before);
}

TEST_CASE("a classifier source seeds a locator except for its head") {
    const Network ft = apply_freeze(source_archive(), Mode::FineTune, Task::Locate, 7);
    CHECK(ft.output_size() == 1);
    CHECK(layer_values(ft, "F6") == archive_values(source_archive(), "F6"));
    CHECK(ft.layer("F6").trainable());
    CHECK_FALSE(ft.layer("C3").trainable());
    const Network nft = apply_freeze(source_archive(), Mode::NoFineTune, Task::Locate, 7);
    CHECK_FALSE(nft.layer("F6").trainable());
    CHECK(nft.layer("head").trainable());
}

TEST_CASE("transfer modes share the source extractor") {
    const Network ft = apply_freeze(source_archive(), Mode::FineTune, Task::Classify, 8);
    const Network nft = apply_freeze(source_archive(), Mode::NoFineTune, Task::Classify, 9);
    const Network ded = apply_freeze(source_archive(), Mode::Dedicated, Task::Classify, 9);
    const std::size_t flatten = *ft.layer_index("flatten");
    for (const auto& s : source_ds().test) {
        const auto a = ft.forward_range(s.frame, 0, flatten);
        CHECK(a == nft.forward_range(s.frame, 0, flatten));
        CHECK(a != ded.forward_range(s.frame, 0, flatten));
    }
}

TEST_CASE("dedicated training on the source data reproduces pretraining") {
    const auto cfg = quick(Task::Classify, 1);
    Network net = apply_freeze(source_archive(), Mode::Dedicated, Task::Classify, cfg.seed);
    for (const auto* p : net.params()) CHECK_FALSE(p->frozen);
    neuralnet::train(net, source_ds().train, source_ds().test, cfg);
    CHECK(neuralnet::encode(neuralnet::snapshot(net)) == neuralnet::encode(source_archive()));
}

TEST_CASE("adapt covers every target and mode in plan order") {
    TransferPlan plan;
    plan.target_lengths = {12.5, 800};
    plan.task = Task::Locate;
    plan.config = quick(Task::Locate, 3, 2);
    const auto result = adapt(plan, source_archive(), fixture::tiny_datasets({12.5, 800}));
    REQUIRE(result.outcomes.size() == 6);
    CHECK(result.outcomes[0].length == 12.5);
    CHECK(result.outcomes[0].mode == Mode::FineTune);
    CHECK(result.outcomes[5].mode == Mode::Dedicated);
    for (const auto& o : result.outcomes) {
        CHECK(o.metrics.samples == fixture::tiny_dataset(o.length).test.size() - 1);  // healthy records dropped
        CHECK(o.history.train.size() == 2);
        CHECK(o.seconds > 0.0);
    }
    CHECK(result.find(800, Mode::NoFineTune) == &result.outcomes[4]);
    CHECK(result.find(50, Mode::NoFineTune) == nullptr);
}

TEST_CASE("plans are validated before training") {
    const auto data = fixture::tiny_datasets({12.5});
    TransferPlan plan;
    plan.target_lengths = {12.5};
    plan.config = quick(Task::Classify, 1);
    plan.target_lengths = {75};
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    plan.target_lengths = {100};
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    plan.target_lengths = {25};
    CHECK_THROWS_AS(adapt(plan, source_archive(), data), ValidationError);
    plan.target_lengths = {12.5};
    plan.modes.clear();
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    plan.modes = {Mode::FineTune};
    plan.task = Task::Locate;
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    plan.config.epochs = 0;
    plan.task = Task::Classify;
    CHECK_THROWS_AS(plan.validate(), ValidationError);
    CHECK_THROWS_AS(mode_from_string("partial"), ValidationError);
    for (Mode m : kAllModes) CHECK(mode_from_string(to_string(m)) == m);
}

TEST_CASE("suite report aggregates 18 rows ordered by length then mode") {
    const std::vector<double> targets{800, 12.5, 25, 50, 200, 400};
    std::vector<TransferResult> reps;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        TransferResult r;
        r.seed = seed;
        for (double l : targets)
            for (Mode m : {Mode::Dedicated, Mode::NoFineTune, Mode::FineTune}) {
                TargetOutcome o;
                o.length = l;
                o.mode = m;
                o.metrics.accuracy = 0.9 + 0.01 * static_cast<double>(seed);
                o.seconds = m == Mode::Dedicated ? 10.0 : 5.0;
                r.outcomes.push_back(o);
            }
        reps.push_back(r);
    }
    const auto rows = transfer_suite_report(reps);
    REQUIRE(rows.size() == 18);
    CHECK(rows.front().length == 12.5);
    CHECK(rows.front().mode == Mode::FineTune);
    CHECK(rows[2].mode == Mode::Dedicated);
    CHECK(rows.back().length == 800);
    for (const auto& row : rows) {
        CHECK(row.accuracy.mean == doctest::Approx(0.92));
        CHECK(row.accuracy.std == doctest::Approx(0.01));
        CHECK(row.time_ratio.mean == (row.mode == Mode::Dedicated ? 1.0 : 0.5));
        CHECK(row.seeds == std::vector<std::uint64_t>{1, 2, 3});
    }
    reps[1].outcomes.pop_back();
    CHECK_THROWS_AS(transfer_suite_report(reps), ValidationError);
}
