#include <doctest.h>

#include <random>
#include <set>

#include "fixtures.hpp"
#include "tlfault/baselines.hpp"
#include "tlfault/error.hpp"

using namespace tlfault;
using namespace tlfault::baselines;

namespace {

// Tight blobs around well-separated centres; point i belongs to blob i % k.
std::vector<Point> blobs(std::size_t k, std::size_t per_blob, std::uint64_t seed, std::vector<int>* labels) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, 0.01);
    std::vector<Point> pts;
    for (std::size_t i = 0; i < k * per_blob; ++i) {
        const std::size_t b = i % k;
        Point p{};
        p[b % p.size()] = 10.0 * static_cast<double>(1 + b / p.size());
        for (double& x : p) x += jitter(rng);
        pts.push_back(p);
        if (labels) labels->push_back(static_cast<int>(b));
    }
    return pts;
}

} // namespace

TEST_CASE("one cluster sits at the mean") {
    const auto pts = blobs(3, 20, 1, nullptr);
    const auto m = kmeans_fit(pts, {.k = 1, .seed = 2});
    Point mean{};
    for (const auto& p : pts)
        for (std::size_t f = 0; f < p.size(); ++f) mean[f] += p[f] / static_cast<double>(pts.size());
    for (std::size_t f = 0; f < mean.size(); ++f) CHECK(m.centroids[0][f] == doctest::Approx(mean[f]).epsilon(1e-12));
    CHECK(m.iterations <= 2);
}

TEST_CASE("eleven separated blobs are recovered exactly") {
    std::vector<int> labels;
    const auto pts = blobs(11, 30, 3, &labels);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = kmeans_fit(pts, {.k = 11, .seed = seed});
        const auto score = cluster_accuracy(m, pts, labels);
        CHECK(score.fraction_correct == 1.0);
        CHECK(score.accuracy == 1.0);
        std::set<int> used(score.mapping.label_of_cluster.begin(), score.mapping.label_of_cluster.end());
        CHECK(used.size() == 11);
    }
}

TEST_CASE("inertia never increases and fits are deterministic") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Point> pts(500);
    for (auto& p : pts)
        for (double& x : p) x = u(rng);
    const auto a = kmeans_fit(pts, {.k = 11, .seed = 9});
    for (std::size_t i = 1; i < a.inertia_history.size(); ++i)
        CHECK(a.inertia_history[i] <= a.inertia_history[i - 1] * (1.0 + 1e-12));
    CHECK(a.inertia <= a.inertia_history.back());
    const auto b = kmeans_fit(pts, {.k = 11, .seed = 9});
    CHECK(a.centroids == b.centroids);
    CHECK(a.iterations == b.iterations);
    const auto c = kmeans_fit(pts, {.k = 11, .seed = 10});
    CHECK(a.centroids != c.centroids);
}

TEST_CASE("too few distinct points is rejected") {
    std::vector<Point> pts(50, Point{});
    for (std::size_t i = 0; i < 10; ++i) pts[i][0] = static_cast<double>(i);  // 10 distinct
    CHECK_THROWS_AS(kmeans_fit(pts, {.k = 11}), ValidationError);
    CHECK_NOTHROW(kmeans_fit(pts, {.k = 10}));
    CHECK_THROWS_AS(kmeans_fit(pts, {.k = 0}), ValidationError);
    CHECK_THROWS_AS(kmeans_fit(pts, {.k = 2, .max_iter = 0}), ValidationError);
}

TEST_CASE("two merged balanced classes score one half") {
    std::vector<Point> pts;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        Point p{};
        p[0] = i < 20 ? 0.0 : 100.0;
        p[1] = 0.001 * i;
        pts.push_back(p);
        // Left blob: classes 0 and 1 interleaved; right blob: class 2 only.
        labels.push_back(i < 20 ? i % 2 : 2);
    }
    const auto m = kmeans_fit(pts, {.k = 2, .seed = 1});
    const auto score = cluster_accuracy(m, pts, labels, 3);
    CHECK(score.fraction_correct == doctest::Approx(0.75));
    const int left = m.assign(pts[0]);
    CHECK(score.mapping.label_of_cluster[left] == 0);  // tie goes to the lower label

    std::vector<int> left_labels(labels.begin(), labels.begin() + 20);
    const auto only_left = cluster_accuracy(m, std::span(pts).first(20), left_labels, 2);
    CHECK(only_left.fraction_correct == 0.5);
    CHECK(only_left.mapping.label_of_cluster[1 - left] == -1);
}

TEST_CASE("feature points take the first frame row of both splits") {
    const auto ds = fixture::tiny_dataset(50.0);
    std::vector<int> labels;
    const auto pts = feature_points(ds, &labels);
    REQUIRE(pts.size() == ds.train.size() + ds.test.size());
    CHECK(labels.size() == pts.size());
    for (std::size_t f = 0; f < pts[0].size(); ++f) CHECK(pts[0][f] == ds.train[0].row(0)[f]);
    CHECK(labels.back() == ds.test.back().class_label);
}
