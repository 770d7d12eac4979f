#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "tlfault/error.hpp"
#include "tlfault/powersim.hpp"

using namespace tlfault;
using namespace tlfault::powersim;
namespace fs = std::filesystem;

namespace {

FaultSpec fault(FaultType t, double d, double r, double dphi = 0.0, double dv = 0.0) {
    FaultSpec f;
    f.fault_type = t;
    f.distance = d;
    f.resistance = r;
    f.phase_diff = dphi;
    f.voltage_fluct = dv;
    return f;
}

std::pair<SourceParams, SourceParams> sources(double dphi = 0.0, double dv = 0.0) {
    SourceParams s1, s2;
    s2.v_ll = s1.v_ll - dv;
    s2.phase = -dphi;
    return {s1, s2};
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("tlfault_test_" + name); }

} // namespace

TEST_CASE("sequence data maps onto the Fortescue phase matrix") {
    LineParams lp;
    const auto z = sequence_to_phase(lp);
    const double w = 2.0 * std::numbers::pi * 60.0;
    const Complex z0(lp.r0, w * lp.l0 * 1e-3), z1(lp.r1, w * lp.l1 * 1e-3);
    const Eigen::Matrix3cd ref = oracle::fortescue_phase_matrix(z0, z1);
    CHECK((z.matrix() - ref).norm() < 1e-12 * ref.norm());

    const auto [b0, b1] = phase_to_sequence(z);
    CHECK(std::abs(b0 - z0) < 1e-12);
    CHECK(std::abs(b1 - z1) < 1e-12);

    const auto whole = sequence_to_phase(lp, false);
    CHECK(std::abs(whole.self - z.self * lp.length) < 1e-9);
}

TEST_CASE("healthy network balances current at every node") {
    LineParams lp;
    auto [s1, s2] = sources();
    const auto sol = solve_network(lp, s1, s2, std::nullopt);
    CHECK(sol.max_kcl_residual() < 1e-9);
    CHECK(oracle::kcl_mismatch(lp, s1, s2, nullptr, sol) < 1e-9);
    CHECK(sol.rcond > 1e-14);
    // Balanced sources and a symmetric line: bus-2 voltages are a balanced set.
    CHECK(std::abs(std::abs(sol.bus2_voltage[0]) - std::abs(sol.bus2_voltage[1])) < 1e-6 * std::abs(sol.bus2_voltage[0]));
}

TEST_CASE("faulted network satisfies the independent nodal oracle for every topology") {
    for (double length : kSupportedLengths) {
        LineParams lp;
        lp.length = length;
        for (FaultType t : kFaultedTypes) {
            const auto f = fault(t, 0.4 * length, 10.0, 30.0, -40.0);
            auto [s1, s2] = sources(30.0, -40.0);
            const auto sol = solve_network(lp, s1, s2, f);
            CHECK(sol.max_kcl_residual() < 1e-9);
            CHECK(oracle::kcl_mismatch(lp, s1, s2, &f, sol) < 1e-9);
        }
    }
}

TEST_CASE("ground faults carry zero-sequence current, ungrounded faults do not") {
    LineParams lp;
    auto [s1, s2] = sources();
    auto i0 = [&](FaultType t) { return oracle::zero_sequence_amplitude(solve_network(lp, s1, s2, fault(t, 40, 20))); };
    const double ll = i0(FaultType::AB);
    const double lll = i0(FaultType::ABC);
    for (FaultType g : {FaultType::AG, FaultType::BG, FaultType::CG, FaultType::ABG, FaultType::ACG, FaultType::BCG}) {
        CHECK(i0(g) > 1e3 * std::max(ll, 1e-9));
        CHECK(i0(g) > 1e3 * std::max(lll, 1e-9));
    }
    // A symmetric three-phase fault draws balanced currents whether or not it touches ground.
    const double lllg = i0(FaultType::ABCG);
    const double ref = std::abs(solve_network(lp, s1, s2, fault(FaultType::ABCG, 40, 20)).bus2_current[0]);
    CHECK(lllg < 1e-9 * ref);
}

TEST_CASE("an almost-open fault reproduces the healthy split network") {
    LineParams lp;
    auto [s1, s2] = sources(30.0, 40.0);
    FaultSpec healthy = fault(FaultType::NoFault, 30, 1.0);
    const auto ref = solve_network(lp, s1, s2, healthy);
    const auto open = solve_network(lp, s1, s2, fault(FaultType::ABG, 30, 1e9));
    for (int p = 0; p < 3; ++p) {
        CHECK(std::abs(open.bus2_voltage[p] - ref.bus2_voltage[p]) < 1e-6 * std::abs(ref.bus2_voltage[p]));
        CHECK(std::abs(open.bus2_current[p] - ref.bus2_current[p]) < 1e-5 * std::abs(ref.bus2_current[p]) + 1e-6);
    }
}

TEST_CASE("a bolted ground fault collapses the faulted phase voltage") {
    LineParams lp;
    auto [s1, s2] = sources();
    const auto healthy = solve_network(lp, s1, s2, std::nullopt);
    const auto sol = solve_network(lp, s1, s2, fault(FaultType::AG, 95, 0.1));
    CHECK(std::abs(sol.bus2_voltage[0]) < 0.5 * std::abs(healthy.bus2_voltage[0]));
    CHECK(std::abs(sol.bus2_current[0]) > 10.0 * std::abs(healthy.bus2_current[0]));
}

TEST_CASE("invalid inputs are rejected before solving") {
    LineParams lp;
    auto [s1, s2] = sources();
    CHECK_THROWS_AS(solve_network(lp, s1, s2, fault(FaultType::AG, 0.0, 1.0)), ValidationError);
    CHECK_THROWS_AS(solve_network(lp, s1, s2, fault(FaultType::AG, 100.0, 1.0)), ValidationError);
    CHECK_THROWS_AS(solve_network(lp, s1, s2, fault(FaultType::AG, 50.0, 0.0)), ValidationError);
    CHECK_THROWS_AS(solve_network(lp, s1, s2, fault(FaultType::AG, 50.0, -3.0)), ValidationError);
    LineParams bad = lp;
    bad.length = 75.0;
    CHECK_THROWS_AS(solve_network(bad, s1, s2, std::nullopt), ValidationError);
    bad = lp;
    bad.r0 = 0.0;
    CHECK_THROWS_AS(solve_network(bad, s1, s2, std::nullopt), ValidationError);
    SourceParams s_bad = s1;
    s_bad.freq = 50.0;
    CHECK_THROWS_AS(solve_network(lp, s_bad, s2, std::nullopt), ValidationError);
}

TEST_CASE("inception angle is measured from the phase-A positive zero crossing") {
    LineParams lp;
    auto [s1, s2] = sources();
    FaultSpec f = fault(FaultType::NoFault, 50, 1.0);
    f.inception_angle = 90.0;
    const auto sol = solve_network(lp, s1, s2, f);
    const auto rec = synthesize_waveforms(sol, sol, f, 20, 40, {std::nullopt, 0});
    // Brute-force scan for the last upward crossing of va before the inception sample.
    const auto& va = rec.channels[0];
    double crossing = -1.0;
    for (std::size_t i = 1; i <= rec.inception_index; ++i)
        if (va[i - 1] < 0.0 && va[i] >= 0.0) crossing = static_cast<double>(i - 1) + va[i - 1] / (va[i - 1] - va[i]);
    REQUIRE(crossing >= 0.0);
    // Quarter cycle = 5 samples; bus-2 voltage lags the source EMF by a small load-flow angle.
    CHECK(std::abs(static_cast<double>(rec.inception_index) - crossing - 5.0) < 0.5);
}

TEST_CASE("waveforms switch from pre-fault to faulted phasors at the inception index") {
    LineParams lp;
    auto [s1, s2] = sources();
    const FaultSpec f = fault(FaultType::BG, 20, 0.1);
    FaultSpec pre_state = f;
    pre_state.fault_type = FaultType::NoFault;
    const auto pre = solve_network(lp, s1, s2, pre_state);
    const auto post = solve_network(lp, s1, s2, f);
    const auto rec = synthesize_waveforms(pre, post, f, 20, 40, {std::nullopt, 0});
    REQUIRE(rec.size() == 60);
    double peak_pre = 0.0, peak_post = 0.0;
    for (std::size_t i = 0; i < 20; ++i) peak_pre = std::max(peak_pre, std::abs(rec.channels[4][i]));
    for (std::size_t i = 20; i < 60; ++i) peak_post = std::max(peak_post, std::abs(rec.channels[4][i]));
    CHECK(peak_post > 5.0 * peak_pre);
    CHECK_THROWS_AS(synthesize_waveforms(pre, post, f, 20, 35, {}), ValidationError);
}

TEST_CASE("measurement noise follows the configured SNR and seed") {
    LineParams lp;
    auto [s1, s2] = sources();
    const FaultSpec f = fault(FaultType::NoFault, 50, 1.0);
    const auto sol = solve_network(lp, s1, s2, f);
    const auto clean = synthesize_waveforms(sol, sol, f, 20, 4000, {std::nullopt, 0});
    const auto a = synthesize_waveforms(sol, sol, f, 20, 4000, {40.0, 7});
    const auto b = synthesize_waveforms(sol, sol, f, 20, 4000, {40.0, 7});
    const auto c = synthesize_waveforms(sol, sol, f, 20, 4000, {40.0, 8});
    CHECK(a.channels == b.channels);
    CHECK(a.channels != c.channels);
    double sig = 0.0, noise = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        sig += clean.channels[0][i] * clean.channels[0][i];
        const double e = a.channels[0][i] - clean.channels[0][i];
        noise += e * e;
    }
    CHECK(10.0 * std::log10(sig / noise) == doctest::Approx(40.0).epsilon(0.025));
}

TEST_CASE("grid enumeration scales distances and counts records") {
    LineParams lp;
    lp.length = 200.0;
    GridAxes g = GridAxes::full();
    CHECK(g.faulted_per_class() == 2160);
    CHECK(g.record_count() == 2160 * 10 + 240);
    const auto specs = enumerate_grid(lp, g);
    CHECK(specs.size() == g.record_count());
    bool saw_190 = false;
    for (const auto& s : specs) saw_190 = saw_190 || std::abs(s.distance - 190.0) < 1e-9;
    CHECK(saw_190);
    CHECK(specs.front().fault_type == FaultType::NoFault);

    const GridAxes r = GridAxes::reduced();
    CHECK(r.faulted_per_class() == 72);
    CHECK(r.record_count() == 72 * 11);

    GridAxes bad = r;
    bad.resistances = {};
    CHECK_THROWS_AS(enumerate_grid(lp, bad), ValidationError);
    bad = r;
    bad.distance_ref = {100.0};
    CHECK_THROWS_AS(enumerate_grid(lp, bad), ValidationError);
}

TEST_CASE("grid generation does not depend on the thread count") {
    LineParams lp;
    GridAxes g = GridAxes::reduced();
    g.phase_diffs = {0, 30};
    g.voltage_flucts = {0};
    g.no_fault_replicates = 4;
    const auto one = generate_grid(lp, g, 11, 1);
    const auto three = generate_grid(lp, g, 11, 3);
    REQUIRE(one.size() == three.size());
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i].channels == three[i].channels);
}

TEST_CASE("waveform files round-trip in both formats") {
    LineParams lp;
    lp.length = 12.5;
    GridAxes g = GridAxes::reduced();
    g.phase_diffs = {-30};
    g.voltage_flucts = {40};
    g.no_fault_replicates = 3;
    const auto recs = generate_grid(lp, g, 3);
    for (const char* ext : {".csv", ".bin"}) {
        const auto path = temp_path(std::string("waves") + ext);
        if (std::string(ext) == ".csv")
            write_waveforms_csv(path, recs);
        else
            write_waveforms_binary(path, recs);
        const auto back = read_waveforms(path);
        REQUIRE(back.size() == recs.size());
        for (std::size_t i = 0; i < recs.size(); ++i) {
            CHECK(back[i].channels == recs[i].channels);
            CHECK(back[i].inception_index == recs[i].inception_index);
            CHECK(back[i].fault.fault_type == recs[i].fault.fault_type);
            CHECK(back[i].fault.distance == recs[i].fault.distance);
            CHECK(back[i].seed == recs[i].seed);
            CHECK(back[i].line.length == 12.5);
        }
        fs::remove(path);
    }

    const auto junk = temp_path("junk.bin");
    std::ofstream(junk) << "TLXW garbage";
    CHECK_THROWS_AS(read_waveforms(junk), ValidationError);
    fs::remove(junk);
}
