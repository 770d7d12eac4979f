#include "tlfault/featurex.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "tlfault/error.hpp"

namespace tlfault::featurex {

namespace {

struct Twiddles {
    std::array<double, kWindowSize> cos{};
    std::array<double, kWindowSize> sin{};

    Twiddles() {
        for (std::size_t n = 0; n < kWindowSize; ++n) {
            const double arg = 2.0 * std::numbers::pi * powersim::kNominalFrequency * static_cast<double>(n) /
                               powersim::kSampleRate;
            cos[n] = std::cos(arg);
            sin[n] = std::sin(arg);
        }
    }
};

const Twiddles& twiddles() {
    static const Twiddles t;
    return t;
}

} // namespace

// ---------------------------------------------------------------------------

std::string ClassCode::str() const {
    return {a ? '1' : '0', b ? '1' : '0', c ? '1' : '0', g ? '1' : '0'};
}

ClassCode ClassCode::parse(std::string_view bits) {
    if (bits.size() != 4 || bits.find_first_not_of("01") != std::string_view::npos)
        throw ValidationError("class code must be four 0/1 characters, got '" + std::string(bits) + "'");
    return {bits[0] == '1', bits[1] == '1', bits[2] == '1', bits[3] == '1'};
}

const std::array<ClassCode, kNumClasses>& class_table() {
    static const std::array<ClassCode, kNumClasses> table{
        ClassCode::parse("0000"), ClassCode::parse("1001"), ClassCode::parse("0101"), ClassCode::parse("0011"),
        ClassCode::parse("1100"), ClassCode::parse("1010"), ClassCode::parse("0110"), ClassCode::parse("1101"),
        ClassCode::parse("1011"), ClassCode::parse("0111"), ClassCode::parse("1110"),
    };
    return table;
}

ClassCode class_code_of(FaultType t) {
    const FaultTopology topo = topology(t);
    if (t == FaultType::ABCG) return {true, true, true, false};
    return {topo.a, topo.b, topo.c, topo.ground};
}

int label_of(ClassCode code) {
    if (code == ClassCode{true, true, true, true}) code.g = false;
    const auto& table = class_table();
    const auto it = std::find(table.begin(), table.end(), code);
    if (it == table.end()) throw ValidationError("class code " + code.str() + " is not one of the 11 states");
    return static_cast<int>(it - table.begin());
}

ClassCode code_of_label(int label) {
    if (label < 0 || label >= kNumClasses) throw ValidationError("class label out of range");
    return class_table()[static_cast<std::size_t>(label)];
}

// ---------------------------------------------------------------------------

double main_harmonic(std::span<const double> window) {
    if (window.size() != kWindowSize) throw ValidationError("main_harmonic expects a 30-sample window");
    const Twiddles& tw = twiddles();
    double re = 0.0;
    double im = 0.0;
    for (std::size_t n = 0; n < kWindowSize; ++n) {
        re += window[n] * tw.cos[n];
        im -= window[n] * tw.sin[n];
    }
    return 2.0 / static_cast<double>(kWindowSize) * std::hypot(re, im);
}

std::vector<double> zero_sequence(std::span<const double> ia, std::span<const double> ib,
                                  std::span<const double> ic) {
    if (ia.size() != ib.size() || ia.size() != ic.size())
        throw ValidationError("zero_sequence: phase arrays differ in length");
    std::vector<double> out(ia.size());
    for (std::size_t i = 0; i < ia.size(); ++i) out[i] = (ia[i] + ib[i] + ic[i]) / 3.0;
    return out;
}

FeatureVector window_features(const powersim::WaveformRecord& rec, std::size_t start) {
    if (start + kWindowSize > rec.size()) throw ValidationError("window runs past the end of the record");
    FeatureVector f{};
    for (std::size_t c = 0; c < powersim::kNumChannels; ++c)
        f[c] = main_harmonic(std::span<const double>(rec.channels[c]).subspan(start, kWindowSize));
    auto slice = [&](std::size_t c) { return std::span<const double>(rec.channels[c]).subspan(start, kWindowSize); };
    const std::vector<double> i0 = zero_sequence(slice(3), slice(4), slice(5));
    f[6] = main_harmonic(i0);
    return f;
}

Sample assemble_frame(const powersim::WaveformRecord& rec) {
    if (rec.inception_index > rec.size() || rec.post_samples() < kMinPostSamples)
        throw ValidationError("record has " + std::to_string(rec.size() - std::min(rec.size(), rec.inception_index)) +
                              " post-inception samples; 36 are required");
    Sample s;
    for (std::size_t r = 0; r < kFrameRows; ++r) {
        const FeatureVector f = window_features(rec, rec.inception_index + r);
        std::copy(f.begin(), f.end(), s.frame.begin() + static_cast<std::ptrdiff_t>(r * kNumFeatures));
    }
    s.class_code = class_code_of(rec.fault.fault_type);
    s.class_label = label_of(s.class_code);
    s.length = rec.line.length;
    s.location = rec.fault.fault_type == FaultType::NoFault ? std::numeric_limits<double>::quiet_NaN()
                                                             : rec.fault.distance / rec.line.length;
    return s;
}

// ---------------------------------------------------------------------------

double Scaler::apply(std::size_t feature, double x) const {
    const double range = max[feature] - min[feature];
    if (!(range > 0.0)) return 0.0;
    return std::clamp((x - min[feature]) / range, 0.0, 1.0);
}

FeatureVector Scaler::apply(const FeatureVector& x) const {
    FeatureVector out{};
    for (std::size_t f = 0; f < kNumFeatures; ++f) out[f] = apply(f, x[f]);
    return out;
}

void Scaler::apply_in_place(Sample& s) const {
    for (std::size_t r = 0; r < kFrameRows; ++r)
        for (std::size_t f = 0; f < kNumFeatures; ++f) {
            double& x = s.frame[r * kNumFeatures + f];
            x = apply(f, x);
        }
}

Scaler fit_scaler(std::span<const Sample> train) {
    if (train.empty()) throw ValidationError("fit_scaler needs at least one sample");
    Scaler sc;
    sc.min.fill(std::numeric_limits<double>::infinity());
    sc.max.fill(-std::numeric_limits<double>::infinity());
    for (const Sample& s : train)
        for (std::size_t r = 0; r < kFrameRows; ++r)
            for (std::size_t f = 0; f < kNumFeatures; ++f) {
                const double x = s.frame[r * kNumFeatures + f];
                sc.min[f] = std::min(sc.min[f], x);
                sc.max[f] = std::max(sc.max[f], x);
            }
    return sc;
}

std::vector<Sample> apply_scaler(const Scaler& scaler, std::vector<Sample> samples) {
    for (Sample& s : samples) scaler.apply_in_place(s);
    return samples;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(const std::vector<Sample>& samples,
                                                                  double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("split ratio must lie in (0, 1)");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].class_label].push_back(i);

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2)
            throw ValidationError("class " + std::to_string(label) + " has fewer than 2 samples; cannot split");
        std::shuffle(idx.begin(), idx.end(), rng);
        auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    }
    // Interleave classes so that downstream batching does not see class-sorted data.
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    std::shuffle(test_idx.begin(), test_idx.end(), rng);

    std::pair<std::vector<Sample>, std::vector<Sample>> out;
    for (std::size_t i : train_idx) out.first.push_back(samples[i]);
    for (std::size_t i : test_idx) out.second.push_back(samples[i]);
    return out;
}

FeatureDataset build_dataset(const std::vector<powersim::WaveformRecord>& records, double ratio,
                             std::uint64_t seed) {
    if (records.empty()) throw ValidationError("no waveform records");
    std::vector<Sample> samples;
    samples.reserve(records.size());
    for (const auto& r : records) samples.push_back(assemble_frame(r));
    auto [train, test] = split_dataset(samples, ratio, seed);
    FeatureDataset ds;
    ds.length = records.front().line.length;
    ds.scaler = fit_scaler(train);
    ds.train = apply_scaler(ds.scaler, std::move(train));
    ds.test = apply_scaler(ds.scaler, std::move(test));
    return ds;
}

FeatureDataset faulted_only(const FeatureDataset& ds) {
    FeatureDataset out;
    out.length = ds.length;
    out.scaler = ds.scaler;
    std::copy_if(ds.train.begin(), ds.train.end(), std::back_inserter(out.train),
                 [](const Sample& s) { return s.faulted(); });
    std::copy_if(ds.test.begin(), ds.test.end(), std::back_inserter(out.test),
                 [](const Sample& s) { return s.faulted(); });
    return out;
}

// ---------------------------------------------------------------------------

std::filesystem::path scaler_path(const std::filesystem::path& dataset) {
    return std::filesystem::path(dataset.string() + ".scaler.json");
}

namespace {

void put_double(std::ostream& os, double x) {
    if (std::isnan(x)) {
        os << "nan";
        return;
    }
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    os.write(buf, res.ptr - buf);
}

double parse_double(std::string_view s) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ValidationError("malformed number '" + std::string(s) + "' in feature dataset");
    return x;
}

} // namespace

void write_dataset(const std::filesystem::path& path, const FeatureDataset& ds) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
    os << "# classes:";
    for (const auto& c : class_table()) os << ' ' << c.str();
    os << "; length_km: ";
    put_double(os, ds.length);
    os << '\n';
    for (std::size_t i = 0; i < kFrameSize; ++i) os << 'x' << i / kNumFeatures << '_' << i % kNumFeatures << ',';
    os << "class_label,class_code,location,split\n";
    auto emit = [&](const Sample& s, const char* split) {
        for (double x : s.frame) {
            put_double(os, x);
            os << ',';
        }
        os << s.class_label << ',' << s.class_code.str() << ',';
        put_double(os, s.location);
        os << ',' << split << '\n';
    };
    for (const auto& s : ds.train) emit(s, "train");
    for (const auto& s : ds.test) emit(s, "test");

    nlohmann::json j;
    j["length_km"] = ds.length;
    j["features"] = {"Va", "Vb", "Vc", "Ia", "Ib", "Ic", "I0"};
    j["min"] = ds.scaler.min;
    j["max"] = ds.scaler.max;
    std::vector<std::string> order;
    for (const auto& c : class_table()) order.push_back(c.str());
    j["class_order"] = order;
    std::ofstream(scaler_path(path)) << j.dump(2) << '\n';
}

FeatureDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open feature dataset " + path.string());
    FeatureDataset ds;
    std::ifstream sj(scaler_path(path));
    if (!sj) throw ValidationError("missing scaler sidecar " + scaler_path(path).string());
    try {
        const nlohmann::json j = nlohmann::json::parse(sj);
        ds.length = j.at("length_km").get<double>();
        ds.scaler.min = j.at("min").get<FeatureVector>();
        ds.scaler.max = j.at("max").get<FeatureVector>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed scaler sidecar: ") + e.what());
    }

    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        std::vector<std::string_view> cells;
        std::string_view rest(line);
        while (true) {
            const auto pos = rest.find(',');
            cells.push_back(rest.substr(0, pos));
            if (pos == std::string_view::npos) break;
            rest.remove_prefix(pos + 1);
        }
        if (cells.size() != kFrameSize + 4) throw ValidationError("feature dataset row has wrong column count");
        Sample s;
        for (std::size_t i = 0; i < kFrameSize; ++i) s.frame[i] = parse_double(cells[i]);
        s.class_label = static_cast<int>(parse_double(cells[kFrameSize]));
        s.class_code = ClassCode::parse(cells[kFrameSize + 1]);
        if (label_of(s.class_code) != s.class_label) throw ValidationError("class_label and class_code disagree");
        s.location = parse_double(cells[kFrameSize + 2]);
        s.length = ds.length;
        const auto split = cells[kFrameSize + 3];
        if (split == "train")
            ds.train.push_back(s);
        else if (split == "test")
            ds.test.push_back(s);
        else
            throw ValidationError("unknown split tag '" + std::string(split) + "'");
    }
    return ds;
}

} // namespace tlfault::featurex
