#include "tlfault/baselines.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

#include "tlfault/error.hpp"
#include "tlfault/neuralnet.hpp"

namespace tlfault::baselines {

namespace {

double sq_dist(const Point& a, const Point& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

} // namespace

int KMeansModel::assign(const Point& p) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = sq_dist(p, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

std::vector<int> KMeansModel::assign(std::span<const Point> points) const {
    std::vector<int> out(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) out[i] = assign(points[i]);
    return out;
}

KMeansModel kmeans_fit(std::span<const Point> points, const KMeansConfig& cfg) {
    if (cfg.k == 0) throw ValidationError("k must be positive");
    if (cfg.max_iter < 1) throw ValidationError("max_iter must be positive");
    if (!(cfg.tol >= 0.0)) throw ValidationError("tol must be non-negative");
    {
        std::set<Point> distinct(points.begin(), points.end());
        if (distinct.size() < cfg.k)
            throw ValidationError("k-means needs at least " + std::to_string(cfg.k) + " distinct points, got " +
                                  std::to_string(distinct.size()));
    }

    const std::size_t n = points.size();
    std::mt19937_64 rng(cfg.seed);
    KMeansModel model;

    // k-means++: each new centre drawn with probability proportional to D(x)^2.
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    model.centroids.push_back(points[first(rng)]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], model.centroids[0]);
    while (model.centroids.size() < cfg.k) {
        double total = 0.0;
        for (double d : d2) total += d;
        std::uniform_real_distribution<double> u(0.0, total);
        const double r = u(rng);
        double acc = 0.0;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (acc > r && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        // Rounding can leave `pick` on an existing centre; fall back to the farthest point.
        if (d2[pick] == 0.0) pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
        model.centroids.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], model.centroids.back()));
    }

    std::vector<int> label(n);
    for (int it = 1; it <= cfg.max_iter; ++it) {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            label[i] = model.assign(points[i]);
            inertia += sq_dist(points[i], model.centroids[label[i]]);
        }
        model.inertia_history.push_back(inertia);
        model.inertia = inertia;
        model.iterations = it;

        std::vector<Point> sum(cfg.k, Point{});
        std::vector<std::size_t> count(cfg.k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t f = 0; f < Point{}.size(); ++f) sum[label[i]][f] += points[i][f];
            ++count[label[i]];
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < cfg.k; ++c) {
            if (count[c] == 0) continue;  // an empty cluster keeps its centre
            Point next;
            for (std::size_t f = 0; f < next.size(); ++f) next[f] = sum[c][f] / static_cast<double>(count[c]);
            shift = std::max(shift, std::sqrt(sq_dist(next, model.centroids[c])));
            model.centroids[c] = next;
        }
        if (shift < cfg.tol) {
            // Centres moved: report the inertia of the final partition against them.
            double final_inertia = 0.0;
            for (std::size_t i = 0; i < n; ++i) final_inertia += sq_dist(points[i], model.centroids[label[i]]);
            model.inertia = std::min(final_inertia, inertia);
            break;
        }
    }
    return model;
}

ClusterLabelMap majority_map(const KMeansModel& model, std::span<const Point> points, std::span<const int> labels,
                             int num_classes) {
    if (points.size() != labels.size()) throw ValidationError("points and labels differ in length");
    std::vector<std::vector<long>> votes(model.k(), std::vector<long>(num_classes, 0));
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) throw ValidationError("label out of range");
        ++votes[model.assign(points[i])][labels[i]];
    }
    ClusterLabelMap map;
    map.label_of_cluster.assign(model.k(), -1);
    for (std::size_t c = 0; c < model.k(); ++c) {
        const auto it = std::max_element(votes[c].begin(), votes[c].end());
        if (*it > 0) map.label_of_cluster[c] = static_cast<int>(it - votes[c].begin());
        for (long v : votes[c]) map.mapped_points += static_cast<std::size_t>(v);
    }
    return map;
}

ClusterScore cluster_accuracy(const KMeansModel& model, std::span<const Point> points, std::span<const int> labels,
                              int num_classes) {
    if (points.empty()) throw ValidationError("no points to score");
    ClusterScore score;
    score.mapping = majority_map(model, points, labels, num_classes);
    std::vector<int> predicted(points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
        predicted[i] = score.mapping.label_of_cluster[model.assign(points[i])];
    const auto m = neuralnet::classification_metrics(labels, predicted, num_classes);
    score.fraction_correct = m.fraction_correct;
    score.accuracy = m.accuracy;
    return score;
}

std::vector<Point> feature_points(const featurex::FeatureDataset& ds, std::vector<int>* labels) {
    std::vector<Point> pts;
    if (labels) labels->clear();
    for (const auto* side : {&ds.train, &ds.test})
        for (const auto& s : *side) {
            Point p;
            std::copy_n(s.frame.begin(), p.size(), p.begin());
            pts.push_back(p);
            if (labels) labels->push_back(s.class_label);
        }
    return pts;
}

} // namespace tlfault::baselines
