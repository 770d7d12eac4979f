#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tlfault/featurex.hpp"

namespace tlfault::baselines {

using Point = featurex::FeatureVector;

struct KMeansModel {
    std::vector<Point> centroids;
    int iterations = 0;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after each assignment step

    std::size_t k() const { return centroids.size(); }
    /// Index of the nearest centroid (lowest index wins ties).
    int assign(const Point& p) const;
    std::vector<int> assign(std::span<const Point> points) const;
};

struct KMeansConfig {
    std::size_t k = 11;
    std::uint64_t seed = 0;
    int max_iter = 300;
    double tol = 1e-4;  // stop once no centroid moves farther than this
};

/// k-means++ seeding followed by Lloyd iterations.
KMeansModel kmeans_fit(std::span<const Point> points, const KMeansConfig& cfg);

/// Majority class per cluster; -1 for clusters that received no points.
struct ClusterLabelMap {
    std::vector<int> label_of_cluster;
    std::size_t mapped_points = 0;
};

ClusterLabelMap majority_map(const KMeansModel& model, std::span<const Point> points, std::span<const int> labels,
                             int num_classes);

struct ClusterScore {
    double fraction_correct = 0.0;  // points whose cluster maps to their own class
    double accuracy = 0.0;          // same one-vs-rest aggregate as the classifier metrics
    ClusterLabelMap mapping;
};

ClusterScore cluster_accuracy(const KMeansModel& model, std::span<const Point> points, std::span<const int> labels,
                              int num_classes = kNumClasses);

/// First frame row of every sample (train and test), already normalized.
std::vector<Point> feature_points(const featurex::FeatureDataset& ds, std::vector<int>* labels = nullptr);

} // namespace tlfault::baselines
