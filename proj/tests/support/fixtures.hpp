#pragma once

#include <map>

#include "tlfault/featurex.hpp"
#include "tlfault/powersim.hpp"

namespace fixture {

/// Four faulted records per class plus four healthy ones; small enough for unit tests.
inline tlfault::powersim::GridAxes tiny_grid() {
    auto g = tlfault::powersim::GridAxes::reduced();
    g.distance_ref = {10, 60};
    g.inception_angles = {20, 100};
    g.resistances = {1};
    g.phase_diffs = {0};
    g.voltage_flucts = {0};
    g.no_fault_replicates = 4;
    return g;
}

inline tlfault::featurex::FeatureDataset tiny_dataset(double length, std::uint64_t seed = 1) {
    tlfault::powersim::LineParams lp;
    lp.length = length;
    return tlfault::featurex::build_dataset(tlfault::powersim::generate_grid(lp, tiny_grid(), seed), 0.7, seed);
}

inline std::map<double, tlfault::featurex::FeatureDataset> tiny_datasets(std::initializer_list<double> lengths) {
    std::map<double, tlfault::featurex::FeatureDataset> m;
    for (double l : lengths) m.emplace(l, tiny_dataset(l));
    return m;
}

} // namespace fixture
