#include "tlfault/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

#include "binary_io.hpp"
#include "tlfault/error.hpp"

namespace tlfault::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using neuralnet::Task;
using transfer::Mode;

std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::Simulate: return "simulate";
    case Stage::Features: return "features";
    case Stage::Pretrain: return "pretrain";
    case Stage::TransferClassify: return "transfer-classify";
    case Stage::TransferLocate: return "transfer-locate";
    case Stage::KMeans: return "kmeans";
    case Stage::Latency: return "latency";
    case Stage::Report: return "report";
    }
    return "?";
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::string fmt(double x) {
    if (std::isnan(x)) return "nan";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

std::string fixed(double x, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << x;
    return os.str();
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
    return static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::uint32_t crc_of(const std::string& s) {
    return crc_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::uint32_t file_crc(const fs::path& p) {
    const auto bytes = detail::read_file_bytes(p.string());
    return crc_of(bytes);
}

void log(Stage s, const std::string& msg) { std::clog << '[' << to_string(s) << "] " << msg << '\n'; }

// --- config (de)serialization ---------------------------------------------------------------

json train_to_json(const neuralnet::TrainConfig& c) {
    return {{"epochs", c.epochs},       {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
            {"beta1", c.beta1},         {"beta2", c.beta2},                 {"epsilon", c.epsilon}};
}

neuralnet::TrainConfig train_from_json(const json& j, neuralnet::TrainConfig c) {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    return c;
}

json grid_to_json(const powersim::GridAxes& g) {
    std::vector<std::string> types;
    for (FaultType t : g.fault_types) types.emplace_back(tlfault::to_string(t));
    json j = {{"distance_ref", g.distance_ref},
              {"inception_angles", g.inception_angles},
              {"resistances", g.resistances},
              {"phase_diffs", g.phase_diffs},
              {"voltage_flucts", g.voltage_flucts},
              {"fault_types", types},
              {"no_fault_replicates", g.no_fault_replicates},
              {"n_pre", g.n_pre},
              {"n_post", g.n_post}};
    j["snr_db"] = g.snr_db ? json(*g.snr_db) : json(nullptr);
    return j;
}

powersim::GridAxes grid_from_json(const json& j) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "reduced") return powersim::GridAxes::reduced();
        if (name == "full") return powersim::GridAxes::full();
        throw ValidationError("unknown grid preset '" + name + "' (reduced, full)");
    }
    powersim::GridAxes g = j.value("preset", std::string("full")) == "reduced" ? powersim::GridAxes::reduced()
                                                                                 : powersim::GridAxes::full();
    g.distance_ref = j.value("distance_ref", g.distance_ref);
    g.inception_angles = j.value("inception_angles", g.inception_angles);
    g.resistances = j.value("resistances", g.resistances);
    g.phase_diffs = j.value("phase_diffs", g.phase_diffs);
    g.voltage_flucts = j.value("voltage_flucts", g.voltage_flucts);
    if (j.contains("fault_types")) {
        g.fault_types.clear();
        for (const auto& t : j.at("fault_types")) g.fault_types.push_back(fault_type_from_string(t.get<std::string>()));
    }
    g.no_fault_replicates = j.value("no_fault_replicates", g.faulted_per_class());
    g.n_pre = j.value("n_pre", g.n_pre);
    g.n_post = j.value("n_post", g.n_post);
    if (j.contains("snr_db")) g.snr_db = j.at("snr_db").is_null() ? std::nullopt : std::optional(j.at("snr_db").get<double>());
    return g;
}

json config_json(const ExperimentConfig& c) {
    std::vector<std::string> modes, tasks;
    for (Mode m : c.modes) modes.emplace_back(transfer::to_string(m));
    for (Task t : c.tasks) tasks.emplace_back(neuralnet::to_string(t));
    return {{"lengths", c.lengths},
            {"source_length", c.source_length},
            {"grid", grid_to_json(c.grid)},
            {"split_ratio", c.split_ratio},
            {"classify", train_to_json(c.classify)},
            {"locate", train_to_json(c.locate)},
            {"modes", modes},
            {"tasks", tasks},
            {"repeats", c.repeats},
            {"kmeans_repeats", c.kmeans_repeats},
            {"kmeans_k", c.kmeans_k},
            {"latency_inferences", c.latency_inferences},
            {"master_seed", c.master_seed},
            {"output_dir", c.output_dir.string()},
            {"threads", c.threads},
            {"strict_timing", c.strict_timing}};
}

ExperimentConfig config_from(const json& j) {
    static const std::set<std::string> known{"lengths",   "source_length",  "grid",      "split_ratio",
                                             "classify",  "locate",         "modes",     "tasks",
                                             "repeats",   "kmeans_repeats", "kmeans_k",  "latency_inferences",
                                             "master_seed", "output_dir",   "threads",   "strict_timing"};
    if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ValidationError("unknown config key '" + key + "'");

    ExperimentConfig c;
    c.lengths = j.value("lengths", c.lengths);
    c.source_length = j.value("source_length", c.source_length);
    if (j.contains("grid")) c.grid = grid_from_json(j.at("grid"));
    c.split_ratio = j.value("split_ratio", c.split_ratio);
    if (j.contains("classify")) c.classify = train_from_json(j.at("classify"), c.classify);
    if (j.contains("locate")) c.locate = train_from_json(j.at("locate"), c.locate);
    if (j.contains("modes")) {
        c.modes.clear();
        for (const auto& m : j.at("modes")) c.modes.push_back(transfer::mode_from_string(m.get<std::string>()));
    }
    if (j.contains("tasks")) {
        c.tasks.clear();
        for (const auto& t : j.at("tasks")) c.tasks.push_back(neuralnet::task_from_string(t.get<std::string>()));
    }
    c.repeats = j.value("repeats", c.repeats);
    c.kmeans_repeats = j.value("kmeans_repeats", c.kmeans_repeats);
    c.kmeans_k = j.value("kmeans_k", c.kmeans_k);
    c.latency_inferences = j.value("latency_inferences", c.latency_inferences);
    c.master_seed = j.value("master_seed", c.master_seed);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.threads = j.value("threads", c.threads);
    c.strict_timing = j.value("strict_timing", c.strict_timing);
    return c;
}

} // namespace

std::uint64_t derive_seed(std::uint64_t master, Stage stage, std::uint64_t sub) {
    return splitmix64(splitmix64(master + static_cast<std::uint64_t>(stage)) ^ sub);
}

void ExperimentConfig::validate() const {
    if (lengths.empty()) throw ValidationError("config lists no line lengths");
    std::set<double> seen;
    for (double l : lengths) {
        if (!powersim::is_supported_length(l))
            throw ValidationError("unsupported line length " + fmt(l) + " km (supported: 12.5, 25, 50, 100, 200, 400, 800)");
        if (!seen.insert(l).second) throw ValidationError("line length " + fmt(l) + " listed twice");
    }
    if (!seen.contains(source_length)) throw ValidationError("source length " + fmt(source_length) + " is not in lengths");
    grid.validate();
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ValidationError("split_ratio must be in (0, 1)");
    classify.validate();
    locate.validate();
    if (modes.empty()) throw ValidationError("config lists no modes");
    if (tasks.empty()) throw ValidationError("config lists no tasks");
    if (repeats < 1) throw ValidationError("repeats must be at least 1");
    if (kmeans_repeats < 0) throw ValidationError("kmeans_repeats must be non-negative");
    if (kmeans_k < 1) throw ValidationError("kmeans_k must be positive");
    if (threads < 1) throw ValidationError("threads must be at least 1");
}

std::vector<double> ExperimentConfig::target_lengths() const {
    std::vector<double> out;
    for (double l : lengths)
        if (l != source_length) out.push_back(l);
    return out;
}

ExperimentConfig config_from_json(const std::string& text) {
    try {
        ExperimentConfig c = config_from(json::parse(text));
        c.classify.loss = neuralnet::LossKind::CrossEntropy;
        c.locate.loss = neuralnet::LossKind::MeanSquaredError;
        return c;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed experiment config: ") + e.what());
    }
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

powersim::GridAxes grid_from_spec(const std::string& name_or_path) {
    if (name_or_path == "reduced" || name_or_path == "full")
        return grid_from_json(json(name_or_path));
    std::ifstream in(name_or_path);
    if (!in) throw ValidationError("unknown grid '" + name_or_path + "' (reduced, full or a JSON file)");
    try {
        return grid_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed grid file: ") + e.what());
    }
}

// --- statistics -------------------------------------------------------------------------------

std::map<std::string, StatSummary> statistical_repeat(
    const std::function<std::map<std::string, double>(std::uint64_t)>& closure, int repeats, std::uint64_t master) {
    if (repeats < 1) throw ValidationError("repeats must be at least 1");
    std::map<std::string, std::vector<double>> values;
    for (int r = 1; r <= repeats; ++r) {
        std::map<std::string, double> out;
        try {
            out = closure(master + static_cast<std::uint64_t>(r));
        } catch (const std::exception& e) {
            throw StageError("repeat " + std::to_string(r), e.what());
        }
        for (const auto& [k, v] : out) values[k].push_back(v);
    }
    std::map<std::string, StatSummary> summary;
    for (const auto& [k, v] : values) summary[k] = summarize(v);
    return summary;
}

LatencyStats measure_inference_latency(const neuralnet::Network& net, std::span<const featurex::Sample> samples,
                                       std::size_t inferences) {
    if (samples.empty()) throw ValidationError("latency measurement needs at least one sample");
    if (inferences == 0) throw ValidationError("latency measurement needs at least one inference");
    using clock = std::chrono::steady_clock;
    volatile double sink = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(100, inferences); ++i)
        sink = sink + net.forward(samples[i % samples.size()].frame)[0];

    std::vector<double> us(inferences);
    for (std::size_t i = 0; i < inferences; ++i) {
        const auto t0 = clock::now();
        const auto out = net.forward(samples[i % samples.size()].frame);
        const auto t1 = clock::now();
        sink = sink + out[0];
        us[i] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    }
    LatencyStats s;
    s.inferences = inferences;
    double total = 0.0;
    for (double u : us) total += u;
    s.mean_us = total / static_cast<double>(inferences);
    std::sort(us.begin(), us.end());
    const auto idx = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(inferences))) - 1;
    s.p99_us = us[std::min(idx, inferences - 1)];
    return s;
}

// --- results persistence --------------------------------------------------------------------

std::vector<transfer::TransferResult> PipelineResults::transfer_results(Task task) const {
    std::map<std::uint64_t, transfer::TransferResult> by_seed;
    for (const auto& r : runs) {
        if (r.task != task) continue;
        auto& tr = by_seed[r.seed];
        tr.task = task;
        tr.seed = r.seed;
        transfer::TargetOutcome o;
        o.length = r.length;
        o.mode = r.mode;
        o.metrics.accuracy = r.accuracy;
        o.metrics.fraction_correct = r.fraction_correct;
        o.metrics.precision = r.precision;
        o.metrics.recall = r.recall;
        o.metrics.f1 = r.f1;
        o.metrics.mse = r.mse;
        o.history = r.history;
        o.seconds = r.seconds;
        tr.outcomes.push_back(std::move(o));
    }
    std::vector<transfer::TransferResult> out;
    for (auto& [_, tr] : by_seed) out.push_back(std::move(tr));
    return out;
}

void save_results(const fs::path& dir, const PipelineResults& r) {
    fs::create_directories(dir);
    json runs = json::array();
    json timing_runs = json::array();
    for (const auto& x : r.runs) {
        runs.push_back({{"task", neuralnet::to_string(x.task)},
                        {"length", x.length},
                        {"mode", transfer::to_string(x.mode)},
                        {"seed", x.seed},
                        {"accuracy", x.accuracy},
                        {"fraction_correct", x.fraction_correct},
                        {"precision", x.precision},
                        {"recall", x.recall},
                        {"f1", x.f1},
                        {"mse", x.mse},
                        {"history", {{"train", x.history.train},
                                     {"validation", x.history.validation},
                                     {"train_loss", x.history.train_loss}}}});
        timing_runs.push_back(x.seconds);
    }
    json km = json::array();
    for (const auto& k : r.kmeans)
        km.push_back({{"length", k.length},
                      {"seed", k.seed},
                      {"accuracy", k.accuracy},
                      {"fraction_correct", k.fraction_correct},
                      {"iterations", k.iterations},
                      {"inertia", k.inertia}});
    json lat = json::array();
    for (const auto& l : r.latency)
        lat.push_back({{"task", neuralnet::to_string(l.task)},
                       {"mean_us", l.stats.mean_us},
                       {"p99_us", l.stats.p99_us},
                       {"inferences", l.stats.inferences}});

    std::ofstream(dir / "results.json") << json{{"config", config_json(r.config)}, {"runs", runs}, {"kmeans", km}}.dump(1)
                                        << '\n';
    std::ofstream(dir / "timing.json") << json{{"run_seconds", timing_runs}, {"latency", lat}}.dump(1) << '\n';
}

PipelineResults load_results(const fs::path& dir) {
    std::ifstream in(dir / "results.json");
    if (!in) throw ValidationError("no results.json in " + dir.string());
    PipelineResults r;
    try {
        const json j = json::parse(in);
        r.config = config_from(j.at("config"));
        for (const auto& x : j.at("runs")) {
            RunRecord rec;
            rec.task = neuralnet::task_from_string(x.at("task").get<std::string>());
            rec.length = x.at("length").get<double>();
            rec.mode = transfer::mode_from_string(x.at("mode").get<std::string>());
            rec.seed = x.at("seed").get<std::uint64_t>();
            rec.accuracy = x.at("accuracy").get<double>();
            rec.fraction_correct = x.at("fraction_correct").get<double>();
            rec.precision = x.at("precision").get<double>();
            rec.recall = x.at("recall").get<double>();
            rec.f1 = x.at("f1").get<double>();
            rec.mse = x.at("mse").get<double>();
            const auto& h = x.at("history");
            rec.history.train = h.at("train").get<std::vector<double>>();
            rec.history.validation = h.at("validation").get<std::vector<double>>();
            rec.history.train_loss = h.at("train_loss").get<std::vector<double>>();
            r.runs.push_back(std::move(rec));
        }
        for (const auto& k : j.at("kmeans"))
            r.kmeans.push_back({k.at("length").get<double>(), k.at("seed").get<std::uint64_t>(),
                                k.at("accuracy").get<double>(), k.at("fraction_correct").get<double>(),
                                k.at("iterations").get<int>(), k.at("inertia").get<double>()});

        if (std::ifstream tin(dir / "timing.json"); tin) {
            const json t = json::parse(tin);
            const auto secs = t.at("run_seconds").get<std::vector<double>>();
            for (std::size_t i = 0; i < std::min(secs.size(), r.runs.size()); ++i) r.runs[i].seconds = secs[i];
            for (const auto& l : t.at("latency"))
                r.latency.push_back({neuralnet::task_from_string(l.at("task").get<std::string>()),
                                     {l.at("mean_us").get<double>(), l.at("p99_us").get<double>(),
                                      l.at("inferences").get<std::size_t>()}});
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed results file: ") + e.what());
    }
    return r;
}

// --- tables -----------------------------------------------------------------------------------

std::vector<KMeansRow> kmeans_table(const std::vector<KMeansRecord>& records) {
    std::map<double, std::vector<const KMeansRecord*>> by_length;
    for (const auto& r : records) by_length[r.length].push_back(&r);
    std::vector<KMeansRow> rows;
    for (const auto& [length, recs] : by_length) {
        KMeansRow row;
        row.length = length;
        std::vector<double> acc, frac, its;
        row.min_iterations = recs.front()->iterations;
        row.max_iterations = recs.front()->iterations;
        for (const auto* r : recs) {
            acc.push_back(r->accuracy);
            frac.push_back(r->fraction_correct);
            its.push_back(r->iterations);
            row.min_iterations = std::min(row.min_iterations, r->iterations);
            row.max_iterations = std::max(row.max_iterations, r->iterations);
            row.seeds.push_back(r->seed);
        }
        row.accuracy = summarize(acc);
        row.fraction_correct = summarize(frac);
        row.iterations = summarize(its);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string length_tag(double length) { return fmt(length); }

namespace {

std::string seed_list(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? " " : "") + std::to_string(seeds[i]);
    return s;
}

std::string pm(const StatSummary& s, double scale = 100.0, int digits = 2) {
    return fixed(s.mean * scale, digits) + " ± " + fixed(s.std * scale, digits);
}

fs::path write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw ValidationError("cannot write " + p.string());
    os << text;
    return p;
}

std::string suite_csv(const std::vector<transfer::SuiteRow>& rows, Task task) {
    std::ostringstream os;
    os << "length_km,mode,repeats,";
    if (task == Task::Classify)
        os << "accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std,";
    else
        os << "mse_mean,mse_std,";
    os << "seeds\n";
    for (const auto& r : rows) {
        os << fmt(r.length) << ',' << transfer::to_string(r.mode) << ',' << r.accuracy.count << ',';
        if (task == Task::Classify)
            for (const auto* s : {&r.accuracy, &r.precision, &r.recall, &r.f1}) os << fmt(s->mean) << ',' << fmt(s->std) << ',';
        else
            os << fmt(r.mse.mean) << ',' << fmt(r.mse.std) << ',';
        os << seed_list(r.seeds) << '\n';
    }
    return os.str();
}

std::string timing_csv(const std::vector<transfer::SuiteRow>& rows) {
    std::ostringstream os;
    os << "length_km,mode,repeats,seconds_mean,seconds_std,ratio_to_dedicated_mean,ratio_to_dedicated_std\n";
    for (const auto& r : rows)
        os << fmt(r.length) << ',' << transfer::to_string(r.mode) << ',' << r.seconds.count << ',' << fmt(r.seconds.mean)
           << ',' << fmt(r.seconds.std) << ',' << fmt(r.time_ratio.mean) << ',' << fmt(r.time_ratio.std) << '\n';
    return os.str();
}

std::string curve_file(const std::vector<double>& values) {
    std::ostringstream os;
    for (std::size_t i = 0; i < values.size(); ++i) os << i + 1 << ' ' << fmt(values[i]) << '\n';
    return os.str();
}

} // namespace

std::vector<CurveSet> mean_curves(const std::vector<RunRecord>& runs) {
    std::map<std::tuple<int, double, int>, std::vector<const RunRecord*>> groups;
    for (const auto& r : runs) groups[{static_cast<int>(r.task), r.length, static_cast<int>(r.mode)}].push_back(&r);
    std::vector<CurveSet> out;
    for (const auto& [key, recs] : groups) {
        CurveSet c;
        const auto& first = *recs.front();
        c.tag = std::string(neuralnet::to_string(first.task)) + "_" + std::string(transfer::to_string(first.mode)) + "_L" +
                length_tag(first.length);
        auto average = [&](auto member) {
            std::vector<double> mean((first.history.*member).size(), 0.0);
            for (const auto* r : recs)
                for (std::size_t e = 0; e < mean.size() && e < (r->history.*member).size(); ++e)
                    mean[e] += (r->history.*member)[e];
            for (double& m : mean) m /= static_cast<double>(recs.size());
            return mean;
        };
        c.history.train = average(&neuralnet::TrainHistory::train);
        c.history.validation = average(&neuralnet::TrainHistory::validation);
        c.history.train_loss = average(&neuralnet::TrainHistory::train_loss);
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<fs::path> emit_plot_data(const fs::path& dir, const std::vector<CurveSet>& curves,
                                     const std::vector<transfer::SuiteRow>& classification,
                                     const std::vector<transfer::SuiteRow>& location) {
    fs::create_directories(dir);
    std::vector<fs::path> files;
    std::ostringstream gp;
    gp << "# gnuplot script: gnuplot plots.gp\nset terminal pngcairo size 900,600\nset key outside\n";
    for (const auto& c : curves) {
        files.push_back(write_text(dir / (c.tag + "_train.dat"), curve_file(c.history.train)));
        if (!c.history.validation.empty())
            files.push_back(write_text(dir / (c.tag + "_validation.dat"), curve_file(c.history.validation)));
        files.push_back(write_text(dir / (c.tag + "_loss.dat"), curve_file(c.history.train_loss)));
        gp << "set output '" << c.tag << ".png'\nset xlabel 'epoch'\nplot '" << c.tag
           << "_train.dat' with lines title 'train'";
        if (!c.history.validation.empty()) gp << ", '" << c.tag << "_validation.dat' with lines title 'validation'";
        gp << "\n";
    }

    auto bars = [&](const std::string& name, const std::vector<transfer::SuiteRow>& rows, auto value) {
        if (rows.empty()) return;
        std::ostringstream os;
        os << "# length_km mode value\n";
        for (const auto& r : rows) os << fmt(r.length) << ' ' << transfer::to_string(r.mode) << ' ' << fmt(value(r)) << '\n';
        files.push_back(write_text(dir / (name + ".dat"), os.str()));
        gp << "set output '" << name << ".png'\nset style data histogram\nset xlabel 'line length (km)'\n";
        bool first = true;
        gp << "plot ";
        for (Mode m : transfer::kAllModes) {
            gp << (first ? "" : ", ") << "'" << name << ".dat' using (strcol(2) eq '" << transfer::to_string(m)
               << "' ? $3 : 1/0):xtic(1) title '" << transfer::to_string(m) << "'";
            first = false;
        }
        gp << "\n";
    };
    bars("bars_accuracy", classification, [](const auto& r) { return r.accuracy.mean; });
    bars("bars_mse", location, [](const auto& r) { return r.mse.mean; });
    // Wall-clock bars are kept apart from the deterministic files.
    bars("timing_bars_classification", classification, [](const auto& r) { return r.seconds.mean; });
    bars("timing_bars_location", location, [](const auto& r) { return r.seconds.mean; });
    files.push_back(write_text(dir / "plots.gp", gp.str()));
    return files;
}

ReportBundle write_reports(const fs::path& dir, const PipelineResults& results) {
    fs::create_directories(dir);
    ReportBundle b;
    const bool has_classify = std::any_of(results.runs.begin(), results.runs.end(), [](const auto& r) { return r.task == Task::Classify; });
    const bool has_locate = std::any_of(results.runs.begin(), results.runs.end(), [](const auto& r) { return r.task == Task::Locate; });
    if (has_classify) b.classification = transfer::transfer_suite_report(results.transfer_results(Task::Classify));
    if (has_locate) b.location = transfer::transfer_suite_report(results.transfer_results(Task::Locate));
    b.kmeans = kmeans_table(results.kmeans);
    b.latency = results.latency;

    if (has_classify) {
        b.files.push_back(write_text(dir / "classification.csv", suite_csv(b.classification, Task::Classify)));
        b.files.push_back(write_text(dir / "timing_classification.csv", timing_csv(b.classification)));
    }
    if (has_locate) {
        b.files.push_back(write_text(dir / "location.csv", suite_csv(b.location, Task::Locate)));
        b.files.push_back(write_text(dir / "timing_location.csv", timing_csv(b.location)));
    }
    if (!b.kmeans.empty()) {
        std::ostringstream os;
        os << "length_km,repeats,accuracy_mean,accuracy_std,fraction_correct_mean,fraction_correct_std,"
              "iterations_mean,iterations_min,iterations_max,seeds\n";
        for (const auto& r : b.kmeans)
            os << fmt(r.length) << ',' << r.accuracy.count << ',' << fmt(r.accuracy.mean) << ',' << fmt(r.accuracy.std)
               << ',' << fmt(r.fraction_correct.mean) << ',' << fmt(r.fraction_correct.std) << ','
               << fmt(r.iterations.mean) << ',' << r.min_iterations << ',' << r.max_iterations << ','
               << seed_list(r.seeds) << '\n';
        b.files.push_back(write_text(dir / "kmeans.csv", os.str()));
    }
    if (!b.latency.empty()) {
        std::ostringstream os;
        os << "task,inferences,mean_us,p99_us\n";
        for (const auto& l : b.latency)
            os << neuralnet::to_string(l.task) << ',' << l.stats.inferences << ',' << fmt(l.stats.mean_us) << ','
               << fmt(l.stats.p99_us) << '\n';
        b.files.push_back(write_text(dir / "timing_latency.csv", os.str()));
    }

    // Markdown summary (deterministic part) and timing summary.
    std::ostringstream md, tmd;
    md << "# Results\n\nRepeats: " << results.config.repeats << ", master seed: " << results.config.master_seed
       << ". Values are mean ± sample std in percent.\n";
    tmd << "# Timing\n\nWall-clock seconds of the training loop; ratio is relative to the dedicated run of the same "
           "repeat.\n";
    if (has_classify) {
        md << "\n## Classification\n\n| Length (km) | Mode | Accuracy | Precision | Recall | F1 |\n|---|---|---|---|---|---|\n";
        for (const auto& r : b.classification)
            md << "| " << fmt(r.length) << " | " << transfer::to_string(r.mode) << " | " << pm(r.accuracy) << " | "
               << pm(r.precision) << " | " << pm(r.recall) << " | " << pm(r.f1) << " |\n";
        tmd << "\n## Classification\n\n| Length (km) | Mode | Seconds | Ratio |\n|---|---|---|---|\n";
        for (const auto& r : b.classification)
            tmd << "| " << fmt(r.length) << " | " << transfer::to_string(r.mode) << " | " << pm(r.seconds, 1.0, 3) << " | "
                << pm(r.time_ratio, 1.0, 3) << " |\n";
    }
    if (has_locate) {
        md << "\n## Location (normalized distance)\n\n| Length (km) | Mode | MSE |\n|---|---|---|\n";
        for (const auto& r : b.location)
            md << "| " << fmt(r.length) << " | " << transfer::to_string(r.mode) << " | " << fixed(r.mse.mean, 6) << " ± "
               << fixed(r.mse.std, 6) << " |\n";
        tmd << "\n## Location\n\n| Length (km) | Mode | Seconds | Ratio |\n|---|---|---|---|\n";
        for (const auto& r : b.location)
            tmd << "| " << fmt(r.length) << " | " << transfer::to_string(r.mode) << " | " << pm(r.seconds, 1.0, 3) << " | "
                << pm(r.time_ratio, 1.0, 3) << " |\n";
    }
    if (!b.kmeans.empty()) {
        md << "\n## K-means\n\n| Length (km) | Accuracy | Fraction correct | Iterations (min-max) |\n|---|---|---|---|\n";
        for (const auto& r : b.kmeans)
            md << "| " << fmt(r.length) << " | " << pm(r.accuracy) << " | " << pm(r.fraction_correct) << " | "
               << r.min_iterations << "-" << r.max_iterations << " |\n";
    }
    if (!b.latency.empty()) {
        tmd << "\n## Inference latency\n\n| Task | Inferences | Mean (us) | p99 (us) |\n|---|---|---|---|\n";
        for (const auto& l : b.latency)
            tmd << "| " << neuralnet::to_string(l.task) << " | " << l.stats.inferences << " | "
                << fixed(l.stats.mean_us, 2) << " | " << fixed(l.stats.p99_us, 2) << " |\n";
    }
    b.files.push_back(write_text(dir / "summary.md", md.str()));
    b.files.push_back(write_text(dir / "timing.md", tmd.str()));

    const auto plots = emit_plot_data(dir / "plots", mean_curves(results.runs), b.classification, b.location);
    b.files.insert(b.files.end(), plots.begin(), plots.end());
    return b;
}

// --- stage artifacts --------------------------------------------------------------------------

namespace {

/// Cache marker: the key describing the inputs and a checksum of the stored output.
bool cache_valid(const fs::path& artifact, const std::string& key) {
    const fs::path marker = artifact.string() + ".stage.json";
    if (!fs::exists(artifact) || !fs::exists(marker)) return false;
    try {
        std::ifstream in(marker);
        const json j = json::parse(in);
        return j.at("key").get<std::string>() == key && j.at("crc32").get<std::uint32_t>() == file_crc(artifact);
    } catch (const std::exception&) {
        return false;
    }
}

void write_marker(const fs::path& artifact, const std::string& key) {
    std::ofstream(artifact.string() + ".stage.json") << json{{"key", key}, {"crc32", file_crc(artifact)}}.dump(1) << '\n';
}

std::uint64_t length_seed(const ExperimentConfig& cfg, Stage stage, double length) {
    return derive_seed(cfg.master_seed, stage, static_cast<std::uint64_t>(std::llround(length * 10.0)));
}

std::string simulate_key(const ExperimentConfig& cfg, double length) {
    const json j = {{"stage", "simulate"},
                    {"version", 1},
                    {"length", length},
                    {"grid", grid_to_json(cfg.grid)},
                    {"seed", length_seed(cfg, Stage::Simulate, length)}};
    return std::to_string(crc_of(j.dump()));
}

} // namespace

std::vector<powersim::WaveformRecord> simulate_stage(const ExperimentConfig& cfg, double length, const fs::path& dir,
                                                     bool* reused) {
    fs::create_directories(dir);
    const fs::path file = dir / ("waveforms_L" + length_tag(length) + ".bin");
    const std::string key = simulate_key(cfg, length);
    if (cache_valid(file, key)) {
        if (reused) *reused = true;
        return powersim::read_waveforms(file);
    }
    if (reused) *reused = false;
    powersim::LineParams lp;
    lp.length = length;
    const unsigned threads = cfg.strict_timing ? 1u : cfg.threads;
    auto recs = powersim::generate_grid(lp, cfg.grid, length_seed(cfg, Stage::Simulate, length), threads);
    powersim::write_waveforms_binary(file, recs);
    write_marker(file, key);
    return recs;
}

featurex::FeatureDataset features_stage(const ExperimentConfig& cfg, double length,
                                        const std::vector<powersim::WaveformRecord>& records, const fs::path& dir,
                                        bool* reused) {
    fs::create_directories(dir);
    const fs::path file = dir / ("features_L" + length_tag(length) + ".csv");
    const fs::path waves = dir / ("waveforms_L" + length_tag(length) + ".bin");
    const std::uint64_t seed = length_seed(cfg, Stage::Features, length);
    const json kj = {{"stage", "features"},
                     {"version", 1},
                     {"ratio", cfg.split_ratio},
                     {"seed", seed},
                     {"input", fs::exists(waves) ? file_crc(waves) : 0u}};
    const std::string key = std::to_string(crc_of(kj.dump()));
    if (cache_valid(file, key) && fs::exists(featurex::scaler_path(file))) {
        if (reused) *reused = true;
        return featurex::read_dataset(file);
    }
    if (reused) *reused = false;
    auto ds = featurex::build_dataset(records, cfg.split_ratio, seed);
    featurex::write_dataset(file, ds);
    write_marker(file, key);
    // Return what a cache hit would return so both paths agree to the bit.
    return featurex::read_dataset(file);
}

// --- pipeline ---------------------------------------------------------------------------------

ReportBundle run_pipeline(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path out = cfg.output_dir;
    const fs::path data = out / "data";
    const fs::path weights = out / "weights";
    fs::create_directories(weights);
    std::ofstream(out / "config.json") << config_to_json(cfg) << '\n';

    auto run_stage = [&](Stage s, auto&& body) {
        try {
            return body();
        } catch (const ValidationError&) {
            throw;
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(std::string(to_string(s)), e.what());
        }
    };

    std::map<double, featurex::FeatureDataset> datasets;
    run_stage(Stage::Simulate, [&] {
        for (double l : cfg.lengths) {
            bool reused = false;
            auto recs = simulate_stage(cfg, l, data, &reused);
            log(Stage::Simulate, "L=" + length_tag(l) + " km: " + std::to_string(recs.size()) + " records" +
                                     (reused ? " (cached)" : ""));
            run_stage(Stage::Features, [&] {
                bool freused = false;
                datasets[l] = features_stage(cfg, l, recs, data, &freused);
                log(Stage::Features, "L=" + length_tag(l) + " km: " + std::to_string(datasets[l].train.size()) + " train / " +
                                         std::to_string(datasets[l].test.size()) + " test" + (freused ? " (cached)" : ""));
            });
        }
    });

    PipelineResults results;
    results.config = cfg;
    const auto targets = cfg.target_lengths();
    auto has_mode = [&](Mode m) { return std::find(cfg.modes.begin(), cfg.modes.end(), m) != cfg.modes.end(); };
    auto has_task = [&](Task t) { return std::find(cfg.tasks.begin(), cfg.tasks.end(), t) != cfg.tasks.end(); };

    auto record = [&](Task task, double length, Mode mode, std::uint64_t seed, const neuralnet::Metrics& m,
                      const neuralnet::TrainHistory& h, double secs) {
        results.runs.push_back({task, length, mode, seed, m.accuracy, m.fraction_correct, m.precision, m.recall, m.f1,
                                m.mse, h, secs});
    };

    std::optional<neuralnet::Network> latency_classifier;
    std::optional<neuralnet::Network> latency_locator;

    for (int r = 1; r <= cfg.repeats; ++r) {
        const std::uint64_t seed = cfg.master_seed + static_cast<std::uint64_t>(r);
        const auto& source = datasets.at(cfg.source_length);

        neuralnet::WeightArchive archive = run_stage(Stage::Pretrain, [&] {
            auto tc = cfg.classify;
            tc.seed = seed;
            neuralnet::TrainResult tr;
            auto a = transfer::pretrain_source(source, Task::Classify, tc, &tr);
            neuralnet::Network net(neuralnet::NetSpec::lenet(Task::Classify), 0);
            neuralnet::load_into(net, a);
            neuralnet::save_weights(net, weights / ("source_classify_r" + std::to_string(r) + ".tlxd"));
            if (!latency_classifier) latency_classifier = std::move(net);
            if (has_task(Task::Classify) && has_mode(Mode::Dedicated))
                record(Task::Classify, cfg.source_length, Mode::Dedicated, seed, tr.metrics, tr.history, tr.seconds);
            log(Stage::Pretrain, "repeat " + std::to_string(r) + ": source accuracy " + fixed(tr.metrics.accuracy, 4));
            return a;
        });

        for (Task task : cfg.tasks) {
            const Stage stage = task == Task::Classify ? Stage::TransferClassify : Stage::TransferLocate;
            run_stage(stage, [&] {
                transfer::TransferPlan plan;
                plan.source_length = cfg.source_length;
                plan.target_lengths = targets;
                plan.modes = cfg.modes;
                plan.task = task;
                plan.config = task == Task::Classify ? cfg.classify : cfg.locate;
                plan.config.seed = seed;
                if (task == Task::Locate && has_mode(Mode::Dedicated)) {
                    neuralnet::TrainResult tr;
                    auto a = transfer::pretrain_source(source, Task::Locate, plan.config, &tr);
                    record(Task::Locate, cfg.source_length, Mode::Dedicated, seed, tr.metrics, tr.history, tr.seconds);
                    if (!latency_locator) {
                        neuralnet::Network n(neuralnet::NetSpec::lenet(Task::Locate), 0);
                        neuralnet::load_into(n, a);
                        latency_locator = n;
                    }
                }
                if (targets.empty()) return;
                const auto res = transfer::adapt(plan, archive, datasets);
                for (const auto& o : res.outcomes) record(task, o.length, o.mode, seed, o.metrics, o.history, o.seconds);
                log(stage, "repeat " + std::to_string(r) + ": " + std::to_string(res.outcomes.size()) + " runs");
            });
        }
    }

    run_stage(Stage::KMeans, [&] {
        for (double l : cfg.lengths) {
            std::vector<int> labels;
            const auto pts = baselines::feature_points(datasets.at(l), &labels);
            for (int r = 1; r <= cfg.kmeans_repeats; ++r) {
                const std::uint64_t seed = cfg.master_seed + static_cast<std::uint64_t>(r);
                baselines::KMeansConfig kc;
                kc.k = cfg.kmeans_k;
                kc.seed = derive_seed(cfg.master_seed, Stage::KMeans, static_cast<std::uint64_t>(r));
                const auto model = baselines::kmeans_fit(pts, kc);
                const auto score = baselines::cluster_accuracy(model, pts, labels);
                results.kmeans.push_back({l, seed, score.accuracy, score.fraction_correct, model.iterations, model.inertia});
            }
        }
        if (cfg.kmeans_repeats > 0) log(Stage::KMeans, std::to_string(results.kmeans.size()) + " clusterings");
    });

    run_stage(Stage::Latency, [&] {
        const auto& test = datasets.at(cfg.source_length).test;
        if (cfg.latency_inferences == 0 || test.empty()) return;
        if (latency_classifier)
            results.latency.push_back({Task::Classify, measure_inference_latency(*latency_classifier, test, cfg.latency_inferences)});
        if (latency_locator)
            results.latency.push_back({Task::Locate, measure_inference_latency(*latency_locator, test, cfg.latency_inferences)});
    });

    return run_stage(Stage::Report, [&] {
        save_results(out, results);
        auto bundle = write_reports(out, results);
        log(Stage::Report, "wrote " + std::to_string(bundle.files.size()) + " files to " + out.string());
        return bundle;
    });
}

} // namespace tlfault::harness
