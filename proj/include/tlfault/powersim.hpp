#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlfault/fault_type.hpp"

namespace tlfault::powersim {

using Complex = std::complex<double>;
using Phasor3 = std::array<Complex, 3>;
using Matrix3c = Eigen::Matrix3cd;

inline constexpr double kNominalFrequency = 60.0;
inline constexpr double kSampleRate = 1200.0;
inline constexpr std::array<double, 7> kSupportedLengths{12.5, 25, 50, 100, 200, 400, 800};

bool is_supported_length(double km);

// Per-km sequence data of the studied line. Inductance in mH/km, capacitance in uF/km.
struct LineParams {
    double r0 = 0.3864;
    double r1 = 0.01273;
    double l0 = 4.1264;
    double l1 = 0.9337;
    double c0 = 7.751e-3;
    double c1 = 12.74e-3;
    double length = 100.0;

    void validate() const;
};

struct SourceParams {
    double v_ll = 240.0; // kV rms, phase to phase
    double freq = kNominalFrequency;
    double r_src = 0.08929;  // ohm
    double l_src = 16.58;    // mH
    double phase = 0.0;      // degrees

    void validate() const;
};

// Constant-impedance wye load at bus 2.
struct LoadParams {
    double p_kw = 100.0;
    double q_kvar = 50.0;
    double v_ll = 240.0;
};

struct FaultSpec {
    FaultType fault_type = FaultType::NoFault;
    double distance = 0.0;         // km from bus 1
    double inception_angle = 0.0;  // degrees after the phase-A positive zero crossing
    double resistance = 1.0;       // ohm
    double phase_diff = 0.0;       // degrees, source 1 minus source 2
    double voltage_fluct = 0.0;    // kV, V1 - V2

    void validate(const LineParams& line) const;
};

/// Three-phase series (or shunt) matrix with equal diagonal and equal off-diagonal entries.
struct PhaseImpedanceMatrix {
    Complex self;
    Complex mutual;

    Matrix3c matrix() const;
};

/// Series impedance at 60 Hz; ohm/km when per_km, otherwise scaled by the line length.
PhaseImpedanceMatrix sequence_to_phase(const LineParams& p, bool per_km = true);

/// Inverse symmetrical-component transform: returns (z0, z1).
std::pair<Complex, Complex> phase_to_sequence(const PhaseImpedanceMatrix& z);

/// Shunt capacitance matrix (uF/km) built from c0/c1 the same way as the series matrix.
PhaseImpedanceMatrix shunt_capacitance(const LineParams& p);

/// Scalar branch of the solved network; current flows from `from` to `to`. Node -1 is ground.
struct Branch {
    std::string name;
    int from = -1;
    int to = -1;
    Complex current;
};

struct PhasorSolution {
    std::vector<std::string> node_names;
    std::vector<Complex> node_voltages;  // V peak phasors
    std::vector<Branch> branches;        // A peak phasors

    Phasor3 source1_emf;
    Phasor3 source2_emf;
    Phasor3 bus2_voltage;
    Phasor3 bus2_current;  // line current arriving at bus 2
    double rcond = 0.0;

    /// Largest |sum of currents leaving a node| divided by the largest branch current.
    double max_kcl_residual() const;
    int node_index(const std::string& name) const;
};

/// Solves the two-source line. A NoFault FaultSpec still splits the line at its distance so that
/// pre-fault and faulted states share one topology; std::nullopt uses a single pi section.
PhasorSolution solve_network(const LineParams& lp, const SourceParams& s1, const SourceParams& s2,
                             const std::optional<FaultSpec>& fault, const LoadParams& load = {});

// Channel order: va, vb, vc, ia, ib, ic.
inline constexpr int kNumChannels = 6;

struct WaveformRecord {
    double sample_rate = kSampleRate;
    std::array<std::vector<double>, kNumChannels> channels;
    std::size_t inception_index = 0;
    FaultSpec fault;
    LineParams line;
    std::uint64_t seed = 0;

    std::size_t size() const { return channels[0].size(); }
    std::size_t post_samples() const { return size() - inception_index; }
};

struct NoiseConfig {
    std::optional<double> snr_db = 60.0;
    std::uint64_t seed = 0;
};

/// Samples pre-fault phasors before the inception index and faulted phasors from it on.
/// The time origin is placed so that sample n_pre sits at the configured inception angle
/// after the positive zero crossing of the source-1 phase-A EMF.
WaveformRecord synthesize_waveforms(const PhasorSolution& pre, const PhasorSolution& post,
                                    const FaultSpec& fault, std::size_t n_pre, std::size_t n_post,
                                    const NoiseConfig& noise = {});

struct GridAxes {
    std::vector<double> distance_ref{1.2, 10, 24, 40, 60, 95};  // percent of line length
    std::vector<double> inception_angles{1, 20, 50, 100, 150};
    std::vector<double> resistances{0.1, 1, 10, 20, 30, 40, 50, 60};
    std::vector<double> phase_diffs{-30, 0, 30};
    std::vector<double> voltage_flucts{-40, 0, 40};
    std::vector<FaultType> fault_types{kFaultedTypes.begin(), kFaultedTypes.end()};
    std::size_t no_fault_replicates = 240;
    std::size_t n_pre = 20;
    std::size_t n_post = 40;
    std::optional<double> snr_db = 60.0;

    static GridAxes full();
    /// 2 distances x 2 angles x 2 resistances x full phase/voltage axes; no-fault balanced.
    static GridAxes reduced();

    std::size_t faulted_per_class() const;
    std::size_t record_count() const;
    void validate() const;
};

/// One FaultSpec per grid point, in generation order (no-fault block first).
std::vector<FaultSpec> enumerate_grid(const LineParams& lp, const GridAxes& grid);

/// Simulates the full grid. Record i uses noise seed derived from (seed, i), so the result
/// does not depend on the thread count.
std::vector<WaveformRecord> generate_grid(const LineParams& lp, const GridAxes& grid,
                                          std::uint64_t seed, unsigned threads = 1);

// Dataset files. CSV carries metadata plus 6 x (n_pre + n_post) sample columns; the binary
// container starts with "TLXW", u16 version, then little-endian u64/f64 fields.
void write_waveforms_csv(const std::filesystem::path& path, const std::vector<WaveformRecord>& recs);
void write_waveforms_binary(const std::filesystem::path& path, const std::vector<WaveformRecord>& recs);
/// Detects the format from the leading bytes.
std::vector<WaveformRecord> read_waveforms(const std::filesystem::path& path);

} // namespace tlfault::powersim
