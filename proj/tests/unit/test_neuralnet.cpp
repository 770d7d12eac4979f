#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tlfault/error.hpp"
#include "tlfault/neuralnet.hpp"

using namespace tlfault;
using namespace tlfault::neuralnet;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

NetSpec small_spec(Task task, Activation act) {
    NetSpec s;
    s.input = {2, 5, 5};
    s.task = task;
    s.layers = {ConvSpec{"C1", 3, 2, act}, PoolSpec{"S2", 2, 1}, ConvSpec{"C3", 2, 2, act}, PoolSpec{"S4", 2, 2},
                FlattenSpec{"flatten"}, DenseSpec{"F5", 5, act},
                DenseSpec{"head", task == Task::Classify ? std::size_t{4} : std::size_t{1}, Activation::None}};
    return s;
}

/// Largest relative error between analytic and central-difference gradients over all parameters.
double gradient_error(Network& net, const std::vector<double>& x, double target) {
    Gradients g = net.make_gradients();
    net.loss_and_gradients(x, target, g);
    const double h = 1e-5;
    double worst = 0.0;
    auto params = net.params();
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < params[k]->value.size(); ++i) {
            double& w = params[k]->value[i];
            const double w0 = w;
            w = w0 + h;
            const double lp = net.loss(x, target);
            w = w0 - h;
            const double lm = net.loss(x, target);
            w = w0;
            const double numeric = (lp - lm) / (2.0 * h);
            const double err = std::abs(numeric - g[k][i]) / std::max(1e-6, std::abs(numeric) + std::abs(g[k][i]));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

featurex::Sample toy_sample(int label, std::mt19937_64& rng) {
    featurex::Sample s;
    std::uniform_real_distribution<double> noise(0.0, 0.1);
    for (std::size_t i = 0; i < s.frame.size(); ++i) s.frame[i] = noise(rng) + (label == 1 && i % 7 == 3 ? 0.8 : 0.0);
    s.class_label = label;
    s.class_code = featurex::code_of_label(label);
    s.location = label == 0 ? std::nan("") : 0.25 + 0.5 * s.frame[0];
    return s;
}

std::vector<featurex::Sample> toy_set(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<featurex::Sample> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(toy_sample(static_cast<int>(i % 2), rng));
    return v;
}

} // namespace

TEST_CASE("LeNet geometry for 7x7 frames") {
    const Network net(NetSpec::lenet(Task::Classify), 1);
    CHECK(net.layer("C1").output_shape() == Shape{6, 5, 5});
    CHECK(net.layer("S2").output_shape() == Shape{6, 4, 4});
    CHECK(net.layer("C3").output_shape() == Shape{16, 2, 2});
    CHECK(net.layer("S4").output_shape() == Shape{16, 1, 1});
    CHECK(net.layer("F5").output_shape().size() == 120);
    CHECK(net.layer("F6").output_shape().size() == 84);
    CHECK(net.output_size() == 11);
    CHECK(Network(NetSpec::lenet(Task::Locate), 1).output_size() == 1);
}

TEST_CASE("softmax output is a point of the probability simplex") {
    const Network net(NetSpec::lenet(Task::Classify), 3);
    std::mt19937_64 rng(3);
    for (int t = 0; t < 200; ++t) {
        const auto p = net.forward(random_vec(49, rng, -50.0, 50.0));
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("analytic gradients match central differences for every layer type") {
    std::mt19937_64 rng(4);
    for (Task task : {Task::Classify, Task::Locate}) {
        for (Activation act : {Activation::Relu, Activation::None}) {
            for (int trial = 0; trial < 5; ++trial) {
                Network net(small_spec(task, act), 100 + trial);
                // Non-zero biases so that no ReLU sits exactly on its kink.
                for (Param* p : net.params())
                    if (p->name.ends_with(".bias"))
                        for (double& b : p->value) b = std::uniform_real_distribution<double>(0.05, 0.3)(rng);
                const auto x = random_vec(50, rng);
                const double target = task == Task::Classify ? static_cast<double>(trial % 4) : 0.3;
                CHECK(gradient_error(net, x, target) < 1e-4);
            }
        }
    }
    Network lenet(NetSpec::lenet(Task::Classify), 8);
    CHECK(gradient_error(lenet, random_vec(49, rng, 0.0, 1.0), 5.0) < 1e-4);
}

TEST_CASE("average pooling is linear") {
    NetSpec s;
    s.input = {3, 6, 6};
    s.layers = {PoolSpec{"P", 2, 2}, FlattenSpec{"flatten"}};
    s.task = Task::Locate;
    s.layers.push_back(DenseSpec{"head", 1, Activation::None});
    const Network net(s, 0);
    std::mt19937_64 rng(5);
    const auto x = random_vec(108, rng), y = random_vec(108, rng);
    const double a = 1.7, b = -0.4;
    std::vector<double> mix(108);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const auto px = net.forward_range(x, 0, 1), py = net.forward_range(y, 0, 1), pm = net.forward_range(mix, 0, 1);
    for (std::size_t i = 0; i < pm.size(); ++i) CHECK(std::abs(pm[i] - (a * px[i] + b * py[i])) < 1e-12);
}

TEST_CASE("training with every layer frozen changes nothing") {
    Network net(NetSpec::lenet(Task::Classify), 6);
    net.freeze_all(true);
    const auto before = snapshot(net);
    auto cfg = TrainConfig::classification(1);
    cfg.epochs = 3;
    const auto data = toy_set(40, 1);
    train(net, data, data, cfg);
    const auto after = snapshot(net);
    for (std::size_t i = 0; i < before.entries.size(); ++i) CHECK(before.entries[i].values == after.entries[i].values);
}

TEST_CASE("single-threaded training is bit-deterministic") {
    const auto data = toy_set(60, 2);
    auto cfg = TrainConfig::classification(7);
    cfg.epochs = 3;
    Network a(NetSpec::lenet(Task::Classify), 7), b(NetSpec::lenet(Task::Classify), 7);
    const auto ra = train(a, data, data, cfg);
    const auto rb = train(b, data, data, cfg);
    CHECK(encode(snapshot(a)) == encode(snapshot(b)));
    CHECK(ra.history.train_loss == rb.history.train_loss);
    CHECK(ra.history.train.size() == 3);
    CHECK(ra.history.validation.size() == 3);
}

TEST_CASE("a separable two-class toy set is learned within 64 epochs") {
    const auto data = toy_set(64, 3);
    Network net(NetSpec::lenet(Task::Classify), 9);
    auto cfg = TrainConfig::classification(9);
    cfg.batch_size = 8;
    const auto r = train(net, data, data, cfg);
    CHECK(r.history.train.back() == 1.0);
}

TEST_CASE("regression training reduces the error") {
    std::vector<featurex::Sample> data;
    for (const auto& s : toy_set(80, 4))
        if (s.faulted()) data.push_back(s);
    Network net(NetSpec::lenet(Task::Locate), 10);
    auto cfg = TrainConfig::location(10);
    cfg.batch_size = 4;
    const auto r = train(net, data, data, cfg);
    CHECK(r.history.train.back() < r.history.train.front());
    CHECK(r.metrics.mse == doctest::Approx(r.history.validation.back()));
}

TEST_CASE("aggregated one-vs-rest accuracy follows the confusion-matrix oracle") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 10);
        const std::size_t n = 1 + rng() % 300;
        std::vector<int> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = static_cast<int>(rng() % k);
            pred[i] = rng() % 3 == 0 ? static_cast<int>(rng() % k) : truth[i];
        }
        const Metrics m = classification_metrics(truth, pred, k);
        long correct = 0;
        for (std::size_t i = 0; i < n; ++i) correct += truth[i] == pred[i];
        const double frac = static_cast<double>(correct) / static_cast<double>(n);
        CHECK(m.fraction_correct == doctest::Approx(frac).epsilon(1e-15));
        // Each miss is one FP and one FN across the K one-vs-rest tables.
        CHECK(m.accuracy == doctest::Approx(1.0 - 2.0 * (1.0 - frac) / k).epsilon(1e-12));
        for (int c = 0; c < k; ++c) {
            long tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                tp += truth[i] == c && pred[i] == c;
                fp += truth[i] != c && pred[i] == c;
                fn += truth[i] == c && pred[i] != c;
            }
            CHECK(m.per_class[c].tp == tp);
            CHECK(m.per_class[c].fp == fp);
            CHECK(m.per_class[c].fn == fn);
            CHECK(m.per_class[c].tn == static_cast<long>(n) - tp - fp - fn);
        }
    }
    CHECK_THROWS_AS(classification_metrics(std::vector<int>{}, std::vector<int>{}, 3), ValidationError);
}

TEST_CASE("regression evaluation refuses no-fault samples") {
    const Network net(NetSpec::lenet(Task::Locate), 1);
    const auto data = toy_set(4, 5);
    CHECK_THROWS_AS(evaluate_regressor(net, data), ValidationError);
}

TEST_CASE("divergent training reports the epoch") {
    Network net(NetSpec::lenet(Task::Locate), 2);
    std::vector<featurex::Sample> data;
    for (const auto& s : toy_set(20, 6))
        if (s.faulted()) data.push_back(s);
    auto cfg = TrainConfig::location(2);
    cfg.learning_rate = 1e200;
    try {
        train(net, data, data, cfg);
        FAIL("expected a training error");
    } catch (const TrainingError& e) {
        CHECK(e.epoch() >= 1);
    }
}

TEST_CASE("weight archives round-trip and reject damage") {
    Network net(NetSpec::lenet(Task::Classify), 12);
    net.set_frozen("C1", true);
    const auto bytes = encode(snapshot(net));
    const auto back = decode(bytes);
    CHECK(encode(back) == bytes);
    CHECK(back.find("C1.weight")->frozen);
    CHECK_FALSE(back.find("F5.weight")->frozen);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(decode(flipped), ArchiveError);
    CHECK_THROWS_AS(decode(std::span(bytes).first(bytes.size() - 9)), ArchiveError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode(bad_magic), ArchiveError);

    const auto path = fs::temp_directory_path() / "tlfault_test_weights.tlxd";
    save_weights(net, path);
    const Network loaded = load_weights(path, NetSpec::lenet(Task::Classify));
    CHECK(encode(snapshot(loaded)) == bytes);
    fs::remove(path);
    CHECK_THROWS_AS(read_archive(path), ArchiveError);
}

TEST_CASE("incompatible archives name the layer and leave the network untouched") {
    const Network locate(NetSpec::lenet(Task::Locate), 1);
    Network classify(NetSpec::lenet(Task::Classify), 2);
    const auto before = encode(snapshot(classify));
    try {
        load_into(classify, snapshot(locate));
        FAIL("expected an archive error");
    } catch (const ArchiveError& e) {
        CHECK(std::string(e.what()).find("head") != std::string::npos);
    }
    CHECK(encode(snapshot(classify)) == before);

    // Loading only the shared layers is fine.
    const std::vector<std::string> shared{"C1", "C3", "F5", "F6"};
    load_into(classify, snapshot(locate), shared);
    CHECK(classify.layer("C1").params()[0].value == locate.layer("C1").params()[0].value);
}
