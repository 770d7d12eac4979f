#include "tlfault/powersim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "binary_io.hpp"
#include "tlfault/error.hpp"

namespace tlfault::powersim {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kRcondFloor = 1e-14;

double omega(double freq) { return kTwoPi * freq; }

Complex emf_phase(const SourceParams& s, int phase) {
    const double peak = s.v_ll * 1e3 * std::sqrt(2.0 / 3.0);
    const double shift = (phase == 0 ? 0.0 : phase == 1 ? -120.0 : 120.0);
    return std::polar(peak, (s.phase + shift) * kDeg);
}

Phasor3 emf(const SourceParams& s) { return {emf_phase(s, 0), emf_phase(s, 1), emf_phase(s, 2)}; }

void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v))
        throw ValidationError(std::string(name) + " must be strictly positive");
}

// Nodal admittance system with named scalar nodes; ground is index -1.
class Network {
public:
    int add_node(std::string name) {
        names_.push_back(std::move(name));
        return static_cast<int>(names_.size()) - 1;
    }
    std::array<int, 3> add_bus(const std::string& name) {
        return {add_node(name + ".a"), add_node(name + ".b"), add_node(name + ".c")};
    }

    struct Element {
        std::string name;
        std::vector<int> nodes;         // column nodes of the admittance block
        Eigen::MatrixXcd admittance;    // current leaving each node = Y * V
        Eigen::VectorXcd source;        // Norton injection into each node
        std::vector<int> to;            // where each row's current goes (-1 ground)
        std::size_t reported_rows = 0;  // leading rows exposed as branches
    };

    // Single admittance y between a and b (b may be ground).
    void add_two_terminal(std::string name, int a, int b, Complex y) {
        Element e;
        e.name = std::move(name);
        e.nodes = {a};
        if (b >= 0) e.nodes.push_back(b);
        e.admittance = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(e.nodes.size()),
                                              static_cast<Eigen::Index>(e.nodes.size()));
        e.admittance(0, 0) = y;
        if (b >= 0) {
            e.admittance(0, 1) = -y;
            e.admittance(1, 0) = -y;
            e.admittance(1, 1) = y;
        }
        e.source = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(e.nodes.size()));
        e.to = {b};
        if (b >= 0) e.to.push_back(a);
        e.reported_rows = 1;
        elements_.push_back(std::move(e));
    }

    // EMF behind a series admittance, connected from ground to node.
    void add_source(std::string name, int node, Complex emf, Complex y) {
        Element e;
        e.name = std::move(name);
        e.nodes = {node};
        e.admittance = Eigen::MatrixXcd::Constant(1, 1, y);
        e.source = Eigen::VectorXcd::Constant(1, emf * y);
        e.to = {-1};
        e.reported_rows = 1;
        elements_.push_back(std::move(e));
    }

    // Coupled three-phase block between bus p and bus q (q may be ground: shunt).
    void add_series3(const std::string& name, const std::array<int, 3>& p, const std::array<int, 3>& q,
                     const Matrix3c& y) {
        Element e;
        e.name = name;
        e.nodes = {p[0], p[1], p[2], q[0], q[1], q[2]};
        e.admittance.resize(6, 6);
        e.admittance << y, -y, -y, y;
        e.source = Eigen::VectorXcd::Zero(6);
        e.to = {q[0], q[1], q[2], p[0], p[1], p[2]};
        e.reported_rows = 3;
        elements_.push_back(std::move(e));
    }
    void add_shunt3(const std::string& name, const std::array<int, 3>& p, const Matrix3c& y) {
        Element e;
        e.name = name;
        e.nodes = {p[0], p[1], p[2]};
        e.admittance = y;
        e.source = Eigen::VectorXcd::Zero(3);
        e.to = {-1, -1, -1};
        e.reported_rows = 3;
        elements_.push_back(std::move(e));
    }

    struct Result {
        Eigen::VectorXcd v;
        double rcond;
    };

    Result solve() const {
        const auto n = static_cast<Eigen::Index>(names_.size());
        Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
        Eigen::VectorXcd j = Eigen::VectorXcd::Zero(n);
        for (const auto& e : elements_) {
            for (std::size_t r = 0; r < e.nodes.size(); ++r) {
                j(e.nodes[r]) += e.source(static_cast<Eigen::Index>(r));
                for (std::size_t c = 0; c < e.nodes.size(); ++c)
                    y(e.nodes[r], e.nodes[c]) += e.admittance(static_cast<Eigen::Index>(r),
                                                              static_cast<Eigen::Index>(c));
            }
        }
        // Row/column equilibration keeps the conditioning estimate meaningful when
        // admittances span many decades (1e-9 S fault branches next to 10 S line sections).
        Eigen::VectorXd scale(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double d = std::abs(y(i, i));
            scale(i) = d > 0.0 ? 1.0 / std::sqrt(d) : 1.0;
        }
        const Eigen::MatrixXcd ys = scale.asDiagonal() * y * scale.asDiagonal();
        Eigen::PartialPivLU<Eigen::MatrixXcd> lu(ys);
        const double rc = lu.rcond();
        if (!(rc > kRcondFloor)) {
            std::ostringstream msg;
            msg << "singular nodal admittance matrix (rcond = " << rc << "); degenerate parameter set";
            throw SolverError(msg.str(), rc);
        }
        Eigen::VectorXcd v = scale.asDiagonal() * lu.solve(scale.asDiagonal() * j);
        // One step of iterative refinement against the unscaled system.
        const Eigen::VectorXcd resid = j - y * v;
        v += scale.asDiagonal() * lu.solve(scale.asDiagonal() * resid);
        return {std::move(v), rc};
    }

    // Expands every element row into a scalar branch current.
    std::vector<Branch> branches(const Eigen::VectorXcd& v) const {
        std::vector<Branch> out;
        for (const auto& e : elements_) {
            Eigen::VectorXcd local(static_cast<Eigen::Index>(e.nodes.size()));
            for (std::size_t i = 0; i < e.nodes.size(); ++i) local(static_cast<Eigen::Index>(i)) = v(e.nodes[i]);
            const Eigen::VectorXcd leaving = e.admittance * local - e.source;
            // Two-port blocks report only the rows at their first terminal.
            for (std::size_t r = 0; r < e.reported_rows; ++r) {
                Branch b;
                b.name = e.name + "[" + std::to_string(r) + "]";
                b.from = e.nodes[r];
                b.to = e.to[r];
                b.current = leaving(static_cast<Eigen::Index>(r));
                out.push_back(std::move(b));
            }
        }
        return out;
    }

    const std::vector<std::string>& names() const { return names_; }

private:
    std::vector<std::string> names_;
    std::vector<Element> elements_;
};

struct Segment {
    Matrix3c series_y;
    Matrix3c shunt_half_y;
};

Segment pi_section(const LineParams& lp, double km) {
    const double w = omega(kNominalFrequency);
    const Matrix3c z = sequence_to_phase(lp, true).matrix() * km;
    const Matrix3c c = shunt_capacitance(lp).matrix() * (km * 1e-6);
    return {z.inverse(), Complex(0.0, w) * c * 0.5};
}

} // namespace

bool is_supported_length(double km) {
    return std::any_of(kSupportedLengths.begin(), kSupportedLengths.end(),
                       [&](double l) { return std::abs(l - km) < 1e-9; });
}

void LineParams::validate() const {
    require_positive(r0, "r0");
    require_positive(r1, "r1");
    require_positive(l0, "l0");
    require_positive(l1, "l1");
    require_positive(c0, "c0");
    require_positive(c1, "c1");
    require_positive(length, "length");
    if (!is_supported_length(length))
        throw ValidationError("line length " + std::to_string(length) +
                              " km is not one of 12.5, 25, 50, 100, 200, 400, 800");
}

void SourceParams::validate() const {
    require_positive(v_ll, "v_ll");
    if (freq != kNominalFrequency) throw ValidationError("source frequency must be 60 Hz");
    require_positive(r_src, "r_src");
    require_positive(l_src, "l_src");
}

void FaultSpec::validate(const LineParams& line) const {
    if (fault_type == FaultType::NoFault) return;
    if (!(distance > 0.0 && distance < line.length))
        throw ValidationError("fault distance must lie strictly inside the line");
    require_positive(resistance, "fault resistance");
}

Matrix3c PhaseImpedanceMatrix::matrix() const {
    Matrix3c m;
    m.setConstant(mutual);
    m.diagonal().setConstant(self);
    return m;
}

PhaseImpedanceMatrix sequence_to_phase(const LineParams& p, bool per_km) {
    require_positive(p.r0, "r0");
    require_positive(p.r1, "r1");
    require_positive(p.l0, "l0");
    require_positive(p.l1, "l1");
    require_positive(p.length, "length");
    const double w = omega(kNominalFrequency);
    const Complex z0(p.r0, w * p.l0 * 1e-3);
    const Complex z1(p.r1, w * p.l1 * 1e-3);
    const double scale = per_km ? 1.0 : p.length;
    return {(z0 + 2.0 * z1) / 3.0 * scale, (z0 - z1) / 3.0 * scale};
}

std::pair<Complex, Complex> phase_to_sequence(const PhaseImpedanceMatrix& z) {
    return {z.self + 2.0 * z.mutual, z.self - z.mutual};
}

PhaseImpedanceMatrix shunt_capacitance(const LineParams& p) {
    require_positive(p.c0, "c0");
    require_positive(p.c1, "c1");
    return {Complex((p.c0 + 2.0 * p.c1) / 3.0), Complex((p.c0 - p.c1) / 3.0)};
}

double PhasorSolution::max_kcl_residual() const {
    std::vector<Complex> sum(node_voltages.size(), Complex{});
    double largest = 0.0;
    for (const auto& b : branches) {
        largest = std::max(largest, std::abs(b.current));
        if (b.from >= 0) sum[static_cast<std::size_t>(b.from)] += b.current;
        if (b.to >= 0) sum[static_cast<std::size_t>(b.to)] -= b.current;
    }
    double worst = 0.0;
    for (const auto& s : sum) worst = std::max(worst, std::abs(s));
    return largest > 0.0 ? worst / largest : worst;
}

int PhasorSolution::node_index(const std::string& name) const {
    const auto it = std::find(node_names.begin(), node_names.end(), name);
    return it == node_names.end() ? -1 : static_cast<int>(it - node_names.begin());
}

PhasorSolution solve_network(const LineParams& lp, const SourceParams& s1, const SourceParams& s2,
                             const std::optional<FaultSpec>& fault, const LoadParams& load) {
    lp.validate();
    s1.validate();
    s2.validate();
    const bool split = fault.has_value();
    if (split) {
        if (!(fault->distance > 0.0 && fault->distance < lp.length))
            throw ValidationError("fault distance must lie strictly inside the line");
        fault->validate(lp);
    }

    Network net;
    const auto bus1 = net.add_bus("bus1");
    std::array<int, 3> mid{};
    if (split) mid = net.add_bus("fault");
    const auto bus2 = net.add_bus("bus2");

    const double w = omega(kNominalFrequency);
    const Complex y_src1 = 1.0 / Complex(s1.r_src, w * s1.l_src * 1e-3);
    const Complex y_src2 = 1.0 / Complex(s2.r_src, w * s2.l_src * 1e-3);
    const Phasor3 e1 = emf(s1);
    const Phasor3 e2 = emf(s2);
    for (int p = 0; p < 3; ++p) {
        net.add_source("source1." + std::string(1, "abc"[p]), bus1[p], e1[p], y_src1);
        net.add_source("source2." + std::string(1, "abc"[p]), bus2[p], e2[p], y_src2);
    }

    const double v_ll = load.v_ll * 1e3;
    const Complex s_load(load.p_kw * 1e3, load.q_kvar * 1e3);
    const Complex y_load = std::conj(s_load) / (v_ll * v_ll);
    for (int p = 0; p < 3; ++p) net.add_two_terminal("load." + std::string(1, "abc"[p]), bus2[p], -1, y_load);

    auto add_line = [&](const std::string& name, const std::array<int, 3>& a, const std::array<int, 3>& b,
                        double km) {
        const Segment seg = pi_section(lp, km);
        net.add_shunt3(name + ".shunt_from", a, seg.shunt_half_y);
        net.add_series3(name + ".series", a, b, seg.series_y);
        net.add_shunt3(name + ".shunt_to", b, seg.shunt_half_y);
    };
    if (split) {
        add_line("line1", bus1, mid, fault->distance);
        add_line("line2", mid, bus2, lp.length - fault->distance);
        const FaultTopology topo = topology(fault->fault_type);
        const std::array<bool, 3> involved{topo.a, topo.b, topo.c};
        const Complex y_f = 1.0 / fault->resistance;
        const int n_involved = int(topo.a) + int(topo.b) + int(topo.c);
        if (n_involved > 0) {
            int common = -1;  // grounded common point collapses onto ground
            if (!topo.ground) common = net.add_node("fault.common");
            for (int p = 0; p < 3; ++p)
                if (involved[static_cast<std::size_t>(p)])
                    net.add_two_terminal("fault.r" + std::string(1, "abc"[p]), mid[p], common, y_f);
        }
    } else {
        add_line("line", bus1, bus2, lp.length);
    }

    const auto [v, rc] = net.solve();

    PhasorSolution sol;
    sol.node_names = net.names();
    sol.node_voltages.assign(v.data(), v.data() + v.size());
    sol.branches = net.branches(v);
    sol.source1_emf = e1;
    sol.source2_emf = e2;
    sol.rcond = rc;
    for (int p = 0; p < 3; ++p) sol.bus2_voltage[p] = v(bus2[p]);

    // Terminal current into bus 2 = series current arriving minus the bus-2 shunt draw.
    const std::string last = split ? "line2" : "line";
    for (const auto& b : sol.branches) {
        for (int p = 0; p < 3; ++p) {
            const std::string idx = "[" + std::to_string(p) + "]";
            if (b.name == last + ".series" + idx) sol.bus2_current[p] += b.current;
            if (b.name == last + ".shunt_to" + idx) sol.bus2_current[p] -= b.current;
        }
    }
    return sol;
}

WaveformRecord synthesize_waveforms(const PhasorSolution& pre, const PhasorSolution& post,
                                    const FaultSpec& fault, std::size_t n_pre, std::size_t n_post,
                                    const NoiseConfig& noise) {
    if (n_post < 36) throw ValidationError("at least 36 post-inception samples are required");
    const double w = omega(kNominalFrequency);
    const double ref_angle = std::arg(pre.source1_emf[0]);
    // Positive-going zero crossing of cos(w t + ref) sits at w t + ref = -pi/2.
    const double t_inception = (-std::numbers::pi / 2.0 + fault.inception_angle * kDeg - ref_angle) / w;

    WaveformRecord rec;
    rec.inception_index = n_pre;
    rec.fault = fault;
    rec.seed = noise.seed;
    const std::size_t n = n_pre + n_post;
    for (auto& ch : rec.channels) ch.resize(n);

    for (std::size_t i = 0; i < n; ++i) {
        const PhasorSolution& s = i < n_pre ? pre : post;
        const double t = t_inception + (static_cast<double>(i) - static_cast<double>(n_pre)) / kSampleRate;
        for (int p = 0; p < 3; ++p) {
            const Complex v = s.bus2_voltage[static_cast<std::size_t>(p)];
            const Complex c = s.bus2_current[static_cast<std::size_t>(p)];
            rec.channels[static_cast<std::size_t>(p)][i] = std::abs(v) * std::cos(w * t + std::arg(v));
            rec.channels[static_cast<std::size_t>(p + 3)][i] = std::abs(c) * std::cos(w * t + std::arg(c));
        }
    }

    if (noise.snr_db) {
        std::seed_seq seq{static_cast<std::uint32_t>(noise.seed), static_cast<std::uint32_t>(noise.seed >> 32)};
        std::mt19937_64 rng(seq);
        const double ratio = std::pow(10.0, *noise.snr_db / 20.0);
        for (auto& ch : rec.channels) {
            double power = 0.0;
            for (double x : ch) power += x * x;
            const double sigma = std::sqrt(power / static_cast<double>(ch.size())) / ratio;
            std::normal_distribution<double> gauss(0.0, sigma);
            for (double& x : ch) x += sigma > 0.0 ? gauss(rng) : 0.0;
        }
    }
    return rec;
}

GridAxes GridAxes::full() { return GridAxes{}; }

GridAxes GridAxes::reduced() {
    GridAxes g;
    g.distance_ref = {10, 60};
    g.inception_angles = {20, 100};
    g.resistances = {1, 40};
    g.no_fault_replicates = g.faulted_per_class();
    return g;
}

std::size_t GridAxes::faulted_per_class() const {
    return distance_ref.size() * inception_angles.size() * resistances.size() * phase_diffs.size() *
           voltage_flucts.size();
}

std::size_t GridAxes::record_count() const {
    return faulted_per_class() * fault_types.size() + no_fault_replicates;
}

void GridAxes::validate() const {
    auto non_empty = [](const std::vector<double>& v, const char* name) {
        if (v.empty()) throw ValidationError(std::string("grid axis '") + name + "' is empty");
    };
    non_empty(distance_ref, "distance");
    non_empty(inception_angles, "inception_angle");
    non_empty(resistances, "resistance");
    non_empty(phase_diffs, "phase_diff");
    non_empty(voltage_flucts, "voltage_fluct");
    if (fault_types.empty() && no_fault_replicates == 0) throw ValidationError("grid produces no records");
    for (double r : resistances)
        if (!(r > 0.0)) throw ValidationError("fault resistance must be strictly positive");
    for (FaultType t : fault_types)
        if (t == FaultType::NoFault) throw ValidationError("fault_types must list faulted topologies only");
    if (n_post < 36) throw ValidationError("n_post must be at least 36");
}

std::vector<FaultSpec> enumerate_grid(const LineParams& lp, const GridAxes& grid) {
    lp.validate();
    grid.validate();
    std::vector<double> distances;
    for (double d_ref : grid.distance_ref) {
        const double d = d_ref / 100.0 * lp.length;
        if (!(d > 0.0) || d >= lp.length)
            throw ValidationError("scaled fault distance " + std::to_string(d) + " km is outside the line");
        distances.push_back(d);
    }

    std::vector<FaultSpec> specs;
    specs.reserve(grid.record_count());
    // No-fault replicates cycle phase difference, then voltage fluctuation, then a one-sample
    // window offset (18 degrees at 20 samples per cycle).
    const std::size_t n_phi = grid.phase_diffs.size();
    const std::size_t n_dv = grid.voltage_flucts.size();
    for (std::size_t r = 0; r < grid.no_fault_replicates; ++r) {
        FaultSpec f;
        f.fault_type = FaultType::NoFault;
        f.phase_diff = grid.phase_diffs[r % n_phi];
        f.voltage_fluct = grid.voltage_flucts[(r / n_phi) % n_dv];
        const std::size_t offset = r / (n_phi * n_dv);
        f.inception_angle = std::fmod(18.0 * static_cast<double>(offset), 360.0);
        f.distance = lp.length / 2.0;
        f.resistance = 0.0;
        specs.push_back(f);
    }
    for (FaultType t : grid.fault_types)
        for (double d : distances)
            for (double angle : grid.inception_angles)
                for (double r : grid.resistances)
                    for (double dphi : grid.phase_diffs)
                        for (double dv : grid.voltage_flucts)
                            specs.push_back({t, d, angle, r, dphi, dv});
    return specs;
}

namespace {

WaveformRecord simulate_one(const LineParams& lp, const GridAxes& grid, const FaultSpec& f, std::uint64_t seed) {
    SourceParams s1;
    SourceParams s2;
    s2.v_ll = s1.v_ll - f.voltage_fluct;
    s2.phase = s1.phase - f.phase_diff;
    FaultSpec pre_state = f;
    pre_state.fault_type = FaultType::NoFault;
    const PhasorSolution pre = solve_network(lp, s1, s2, pre_state);
    const PhasorSolution post = f.fault_type == FaultType::NoFault ? pre : solve_network(lp, s1, s2, f);
    WaveformRecord rec = synthesize_waveforms(pre, post, f, grid.n_pre, grid.n_post, {grid.snr_db, seed});
    rec.line = lp;
    return rec;
}

} // namespace

std::vector<WaveformRecord> generate_grid(const LineParams& lp, const GridAxes& grid, std::uint64_t seed,
                                          unsigned threads) {
    const std::vector<FaultSpec> specs = enumerate_grid(lp, grid);
    std::vector<WaveformRecord> out(specs.size());
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(specs.size())));

    std::vector<std::exception_ptr> errors(threads);
    auto work = [&](unsigned tid) {
        try {
            for (std::size_t i = tid; i < specs.size(); i += threads)
                out[i] = simulate_one(lp, grid, specs[i], seed + i);
        } catch (...) {
            errors[tid] = std::current_exception();
        }
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---------------------------------------------------------------------------------------------
// Dataset files

namespace {

constexpr char kWaveMagic[4] = {'T', 'L', 'X', 'W'};
constexpr std::uint16_t kWaveVersion = 1;
constexpr std::array<const char*, 6> kChannelNames{"va", "vb", "vc", "ia", "ib", "ic"};

void put_double(std::ostream& os, double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    os.write(buf, res.ptr - buf);
}

double parse_double(std::string_view s) {
    double x = 0.0;
    if (s == "nan") return std::nan("");
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ValidationError("malformed number '" + std::string(s) + "' in waveform CSV");
    return x;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        out.push_back(line.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::vector<WaveformRecord> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty waveform CSV: " + path.string());
    std::vector<WaveformRecord> recs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() < 10) throw ValidationError("waveform CSV row has too few columns");
        WaveformRecord r;
        r.line.length = parse_double(cells[0]);
        r.fault.fault_type = fault_type_from_string(cells[1]);
        r.fault.distance = parse_double(cells[2]);
        r.fault.inception_angle = parse_double(cells[3]);
        r.fault.resistance = parse_double(cells[4]);
        r.fault.phase_diff = parse_double(cells[5]);
        r.fault.voltage_fluct = parse_double(cells[6]);
        r.seed = static_cast<std::uint64_t>(std::stoull(std::string(cells[7])));
        r.inception_index = static_cast<std::size_t>(std::stoull(std::string(cells[8])));
        const auto n = static_cast<std::size_t>(std::stoull(std::string(cells[9])));
        if (cells.size() != 10 + kNumChannels * n) throw ValidationError("waveform CSV row length mismatch");
        for (std::size_t c = 0; c < kNumChannels; ++c) {
            r.channels[c].resize(n);
            for (std::size_t i = 0; i < n; ++i) r.channels[c][i] = parse_double(cells[10 + c * n + i]);
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

std::vector<WaveformRecord> read_binary(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader<ValidationError> rd(bytes);
    if (rd.get_string(4) != std::string_view(kWaveMagic, 4)) throw ValidationError("bad waveform magic");
    if (rd.get<std::uint16_t>() != kWaveVersion) throw ValidationError("unsupported waveform container version");
    const auto count = rd.get<std::uint64_t>();
    std::vector<WaveformRecord> recs;
    for (std::uint64_t k = 0; k < count; ++k) {
        WaveformRecord r;
        r.sample_rate = rd.get<double>();
        r.line.r0 = rd.get<double>();
        r.line.r1 = rd.get<double>();
        r.line.l0 = rd.get<double>();
        r.line.l1 = rd.get<double>();
        r.line.c0 = rd.get<double>();
        r.line.c1 = rd.get<double>();
        r.line.length = rd.get<double>();
        r.fault.fault_type = static_cast<FaultType>(rd.get<std::uint8_t>());
        if (static_cast<int>(r.fault.fault_type) > static_cast<int>(FaultType::ABCG))
            throw ValidationError("bad fault type code in waveform container");
        r.fault.distance = rd.get<double>();
        r.fault.inception_angle = rd.get<double>();
        r.fault.resistance = rd.get<double>();
        r.fault.phase_diff = rd.get<double>();
        r.fault.voltage_fluct = rd.get<double>();
        r.seed = rd.get<std::uint64_t>();
        r.inception_index = rd.get<std::uint64_t>();
        const auto n = rd.get<std::uint64_t>();
        for (auto& ch : r.channels) {
            ch.resize(n);
            rd.get_doubles(ch);
        }
        recs.push_back(std::move(r));
    }
    return recs;
}

} // namespace

void write_waveforms_csv(const std::filesystem::path& path, const std::vector<WaveformRecord>& recs) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
    const std::size_t n = recs.empty() ? 0 : recs.front().size();
    os << "length,fault_type,distance,angle,resistance,phase_diff,voltage_fluct,seed,inception_index,n_samples";
    for (const char* ch : kChannelNames)
        for (std::size_t i = 0; i < n; ++i) os << ',' << ch << '_' << i;
    os << '\n';
    for (const auto& r : recs) {
        if (r.size() != n) throw ValidationError("records in one CSV must share a sample count");
        put_double(os, r.line.length);
        os << ',' << to_string(r.fault.fault_type) << ',';
        put_double(os, r.fault.distance);
        os << ',';
        put_double(os, r.fault.inception_angle);
        os << ',';
        put_double(os, r.fault.resistance);
        os << ',';
        put_double(os, r.fault.phase_diff);
        os << ',';
        put_double(os, r.fault.voltage_fluct);
        os << ',' << r.seed << ',' << r.inception_index << ',' << n;
        for (const auto& ch : r.channels)
            for (double x : ch) {
                os << ',';
                put_double(os, x);
            }
        os << '\n';
    }
}

void write_waveforms_binary(const std::filesystem::path& path, const std::vector<WaveformRecord>& recs) {
    detail::ByteWriter w;
    w.put_bytes(std::string_view(kWaveMagic, 4));
    w.put(kWaveVersion);
    w.put(static_cast<std::uint64_t>(recs.size()));
    for (const auto& r : recs) {
        w.put(r.sample_rate);
        for (double x : {r.line.r0, r.line.r1, r.line.l0, r.line.l1, r.line.c0, r.line.c1, r.line.length}) w.put(x);
        w.put(static_cast<std::uint8_t>(r.fault.fault_type));
        for (double x : {r.fault.distance, r.fault.inception_angle, r.fault.resistance, r.fault.phase_diff,
                         r.fault.voltage_fluct})
            w.put(x);
        w.put(r.seed);
        w.put(static_cast<std::uint64_t>(r.inception_index));
        w.put(static_cast<std::uint64_t>(r.size()));
        for (const auto& ch : r.channels) w.put_doubles(ch);
    }
    detail::write_file_bytes(path.string(), w.bytes());
}

std::vector<WaveformRecord> read_waveforms(const std::filesystem::path& path) {
    const auto bytes = detail::read_file_bytes(path.string());
    if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kWaveMagic)) return read_binary(bytes);
    return read_csv(path);
}

} // namespace tlfault::powersim
