#pragma once

// Reference computations written independently of the library internals.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlfault/powersim.hpp"

namespace oracle {

using C = std::complex<double>;

/// Plain O(N) single-bin DFT amplitude at 60 Hz for a 1200 Hz window, in long double.
inline double dft_amplitude(std::span<const double> x) {
    const long double pi = std::numbers::pi_v<long double>;
    long double re = 0.0L, im = 0.0L;
    const auto n = static_cast<long double>(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const long double arg = 2.0L * pi * 60.0L * static_cast<long double>(k) / 1200.0L;
        re += static_cast<long double>(x[k]) * std::cos(arg);
        im -= static_cast<long double>(x[k]) * std::sin(arg);
    }
    return static_cast<double>(2.0L / n * std::sqrt(re * re + im * im));
}

/// Phase matrix rebuilt through the Fortescue transform: Z = A diag(z0, z1, z1) A^-1.
inline Eigen::Matrix3cd fortescue_phase_matrix(C z0, C z1) {
    const C a = std::polar(1.0, 2.0 * std::numbers::pi / 3.0);
    Eigen::Matrix3cd A;
    A << 1, 1, 1, 1, a * a, a, 1, a, a * a;
    Eigen::Matrix3cd d = Eigen::Matrix3cd::Zero();
    d(0, 0) = z0;
    d(1, 1) = z1;
    d(2, 2) = z1;
    return A * d * A.inverse();
}

/// Net current leaving every node, recomputed from the solved node voltages with element
/// models built here from first principles (sources, wye load, pi sections, fault resistors).
/// Returns max |mismatch| divided by the largest element current encountered.
inline double kcl_mismatch(const tlfault::powersim::LineParams& lp, const tlfault::powersim::SourceParams& s1,
                           const tlfault::powersim::SourceParams& s2, const tlfault::powersim::FaultSpec* fault,
                           const tlfault::powersim::PhasorSolution& sol, const tlfault::powersim::LoadParams& load = {}) {
    using namespace tlfault::powersim;
    const double w = 2.0 * std::numbers::pi * 60.0;
    const std::size_t n = sol.node_voltages.size();
    std::vector<C> net(n, C{});
    double largest = 0.0;
    auto V = [&](int i) { return i < 0 ? C{} : sol.node_voltages[static_cast<std::size_t>(i)]; };
    auto leave = [&](int node, C i) {
        largest = std::max(largest, std::abs(i));
        if (node >= 0) net[static_cast<std::size_t>(node)] += i;
    };
    auto idx = [&](const std::string& name) { return sol.node_index(name); };
    const char* ph = "abc";

    for (int p = 0; p < 3; ++p) {
        for (int side = 0; side < 2; ++side) {
            const SourceParams& s = side == 0 ? s1 : s2;
            const double peak = s.v_ll * 1e3 * std::sqrt(2.0 / 3.0);
            const C e = std::polar(peak, (s.phase - 120.0 * p) * std::numbers::pi / 180.0);
            const C z(s.r_src, w * s.l_src * 1e-3);
            const int node = idx(std::string(side == 0 ? "bus1." : "bus2.") + ph[p]);
            leave(node, (V(node) - e) / z);
        }
        const int b2 = idx(std::string("bus2.") + ph[p]);
        const double vll = load.v_ll * 1e3;
        const C y_load = std::conj(C(load.p_kw * 1e3, load.q_kvar * 1e3)) / (vll * vll);
        leave(b2, V(b2) * y_load);
    }

    auto section = [&](const std::string& a, const std::string& b, double km) {
        const C z0(lp.r0 * km, w * lp.l0 * 1e-3 * km), z1(lp.r1 * km, w * lp.l1 * 1e-3 * km);
        const C y0(0.0, w * lp.c0 * 1e-6 * km), y1(0.0, w * lp.c1 * 1e-6 * km);
        const Eigen::Matrix3cd Y = fortescue_phase_matrix(z0, z1).inverse();
        const Eigen::Matrix3cd B = fortescue_phase_matrix(y0, y1) * 0.5;
        Eigen::Vector3cd va, vb;
        std::array<int, 3> ia{}, ib{};
        for (int p = 0; p < 3; ++p) {
            ia[p] = idx(a + "." + ph[p]);
            ib[p] = idx(b + "." + ph[p]);
            va(p) = V(ia[p]);
            vb(p) = V(ib[p]);
        }
        const Eigen::Vector3cd series = Y * (va - vb);
        const Eigen::Vector3cd sh_a = B * va, sh_b = B * vb;
        for (int p = 0; p < 3; ++p) {
            leave(ia[p], series(p) + sh_a(p));
            leave(ib[p], -series(p) + sh_b(p));
        }
    };

    if (fault) {
        section("bus1", "fault", fault->distance);
        section("fault", "bus2", lp.length - fault->distance);
        const auto topo = tlfault::topology(fault->fault_type);
        const bool inv[3] = {topo.a, topo.b, topo.c};
        const int common = topo.ground ? -1 : idx("fault.common");
        for (int p = 0; p < 3; ++p) {
            if (!inv[p]) continue;
            const int node = idx(std::string("fault.") + ph[p]);
            const C i = (V(node) - V(common)) / fault->resistance;
            leave(node, i);
            leave(common, -i);
        }
    } else {
        section("bus1", "bus2", lp.length);
    }
    double worst = 0.0;
    for (const C& c : net) worst = std::max(worst, std::abs(c));
    return worst / largest;
}

/// |Ia + Ib + Ic| / 3 of the bus-2 line current.
inline double zero_sequence_amplitude(const tlfault::powersim::PhasorSolution& sol) {
    return std::abs(sol.bus2_current[0] + sol.bus2_current[1] + sol.bus2_current[2]) / 3.0;
}

} // namespace oracle
