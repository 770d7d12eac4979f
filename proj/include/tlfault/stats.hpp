#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace tlfault {

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value).
struct StatSummary {
    double mean = 0.0;
    double std = 0.0;
    std::size_t count = 0;
};

inline StatSummary summarize(std::span<const double> xs) {
    StatSummary s;
    s.count = xs.size();
    if (xs.empty()) return s;
    bool constant = true;
    for (double x : xs) constant = constant && x == xs[0];
    if (constant) {
        s.mean = xs[0];  // exact, no rounding from the division
        return s;
    }
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

} // namespace tlfault
