#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tlfault/baselines.hpp"
#include "tlfault/error.hpp"
#include "tlfault/harness.hpp"

namespace py = pybind11;
using namespace tlfault;
using neuralnet::Task;

namespace {

struct Waveforms {
    std::vector<powersim::WaveformRecord> records;
};

py::array_t<double> frames_of(const std::vector<featurex::Sample>& samples) {
    py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(samples.size()), featurex::kFrameRows, featurex::kNumFeatures});
    auto view = out.mutable_unchecked<3>();
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t r = 0; r < featurex::kFrameRows; ++r)
            for (std::size_t f = 0; f < featurex::kNumFeatures; ++f) view(i, r, f) = samples[i].row(r)[f];
    return out;
}

std::vector<int> labels_of(const std::vector<featurex::Sample>& samples) {
    std::vector<int> v;
    for (const auto& s : samples) v.push_back(s.class_label);
    return v;
}

std::vector<double> locations_of(const std::vector<featurex::Sample>& samples) {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.location);
    return v;
}

py::dict metrics_dict(const neuralnet::Metrics& m) {
    py::dict d;
    d["accuracy"] = m.accuracy;
    d["fraction_correct"] = m.fraction_correct;
    d["precision"] = m.precision;
    d["recall"] = m.recall;
    d["f1"] = m.f1;
    d["mse"] = m.mse;
    d["samples"] = m.samples;
    return d;
}

py::dict history_dict(const neuralnet::TrainHistory& h) {
    py::dict d;
    d["train"] = h.train;
    d["validation"] = h.validation;
    d["train_loss"] = h.train_loss;
    return d;
}

neuralnet::TrainConfig train_config(Task task, std::optional<int> epochs, std::size_t batch_size, double lr,
                                    std::uint64_t seed) {
    auto cfg = task == Task::Classify ? neuralnet::TrainConfig::classification(seed)
                                      : neuralnet::TrainConfig::location(seed);
    if (epochs) cfg.epochs = *epochs;
    cfg.batch_size = batch_size;
    cfg.learning_rate = lr;
    return cfg;
}

const featurex::FeatureDataset for_task(const featurex::FeatureDataset& ds, Task task) {
    return task == Task::Locate ? featurex::faulted_only(ds) : ds;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Fault simulation, feature extraction and transfer-learned CNN classification";

    auto base = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<ArchiveError>(m, "ArchiveError", base.ptr());
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
    py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
    py::register_exception<SolverError>(m, "SolverError", PyExc_RuntimeError);

    m.attr("SUPPORTED_LENGTHS") = std::vector<double>(powersim::kSupportedLengths.begin(), powersim::kSupportedLengths.end());

    py::class_<Waveforms>(m, "Waveforms")
        .def("__len__", [](const Waveforms& w) { return w.records.size(); })
        .def("samples", [](const Waveforms& w, std::size_t i) {
            const auto& r = w.records.at(i);
            py::array_t<double> out(std::vector<py::ssize_t>{powersim::kNumChannels, static_cast<py::ssize_t>(r.size())});
            auto view = out.mutable_unchecked<2>();
            for (std::size_t c = 0; c < powersim::kNumChannels; ++c)
                for (std::size_t n = 0; n < r.size(); ++n) view(c, n) = r.channels[c][n];
            return out;
        }, "Channels Va, Vb, Vc, Ia, Ib, Ic of record i as a (6, N) array")
        .def("fault_type", [](const Waveforms& w, std::size_t i) { return std::string(to_string(w.records.at(i).fault.fault_type)); })
        .def("inception_index", [](const Waveforms& w, std::size_t i) { return w.records.at(i).inception_index; })
        .def("save", [](const Waveforms& w, const std::filesystem::path& p) {
            if (p.extension() == ".csv") powersim::write_waveforms_csv(p, w.records);
            else powersim::write_waveforms_binary(p, w.records);
        });

    m.def("simulate", [](double length, const std::string& grid, std::uint64_t seed, std::optional<double> snr_db,
                         unsigned threads) {
        powersim::LineParams lp;
        lp.length = length;
        auto axes = harness::grid_from_spec(grid);
        axes.snr_db = snr_db;
        py::gil_scoped_release release;
        return Waveforms{powersim::generate_grid(lp, axes, seed, threads)};
    }, py::arg("length"), py::arg("grid") = "reduced", py::arg("seed") = 0, py::arg("snr_db") = 60.0,
       py::arg("threads") = 1, "Simulate every scenario of a grid preset (or JSON grid file) for one line length");
    m.def("load_waveforms", [](const std::filesystem::path& p) { return Waveforms{powersim::read_waveforms(p)}; });

    py::class_<featurex::FeatureDataset>(m, "Dataset")
        .def_readonly("length", &featurex::FeatureDataset::length)
        .def_property_readonly("train_frames", [](const featurex::FeatureDataset& d) { return frames_of(d.train); })
        .def_property_readonly("test_frames", [](const featurex::FeatureDataset& d) { return frames_of(d.test); })
        .def_property_readonly("train_labels", [](const featurex::FeatureDataset& d) { return labels_of(d.train); })
        .def_property_readonly("test_labels", [](const featurex::FeatureDataset& d) { return labels_of(d.test); })
        .def_property_readonly("train_locations", [](const featurex::FeatureDataset& d) { return locations_of(d.train); })
        .def_property_readonly("test_locations", [](const featurex::FeatureDataset& d) { return locations_of(d.test); })
        .def("faulted_only", &featurex::faulted_only)
        .def("save", [](const featurex::FeatureDataset& d, const std::filesystem::path& p) { featurex::write_dataset(p, d); });

    m.def("extract_features", [](const Waveforms& w, double split, std::uint64_t seed) {
        return featurex::build_dataset(w.records, split, seed);
    }, py::arg("waveforms"), py::arg("split") = 0.7, py::arg("seed") = 0);
    m.def("load_dataset", &featurex::read_dataset);

    py::class_<neuralnet::Network>(m, "Network")
        .def(py::init([](const std::string& task, std::uint64_t seed) {
            return neuralnet::Network(neuralnet::NetSpec::lenet(neuralnet::task_from_string(task)), seed);
        }), py::arg("task") = "classify", py::arg("seed") = 0)
        .def_property_readonly("task", [](const neuralnet::Network& n) { return std::string(to_string(n.task())); })
        .def_property_readonly("parameter_count", &neuralnet::Network::parameter_count)
        .def("predict", [](const neuralnet::Network& n, py::array_t<double, py::array::c_style | py::array::forcecast> frames) {
            if (frames.ndim() != 3 || frames.shape(1) != 7 || frames.shape(2) != 7)
                throw ValidationError("frames must have shape (n, 7, 7)");
            py::array_t<double> out(std::vector<py::ssize_t>{frames.shape(0), static_cast<py::ssize_t>(n.output_size())});
            auto o = out.mutable_unchecked<2>();
            for (py::ssize_t i = 0; i < frames.shape(0); ++i) {
                const auto y = n.forward(std::span<const double>(frames.data(i, 0, 0), featurex::kFrameSize));
                for (std::size_t k = 0; k < y.size(); ++k) o(i, k) = y[k];
            }
            return out;
        }, "Class probabilities or normalized distance per frame")
        .def("save", &neuralnet::save_weights)
        .def_static("load", [](const std::filesystem::path& p, const std::string& task) {
            return neuralnet::load_weights(p, neuralnet::NetSpec::lenet(neuralnet::task_from_string(task)));
        }, py::arg("path"), py::arg("task") = "classify");

    m.def("train", [](neuralnet::Network& net, const featurex::FeatureDataset& ds, std::optional<int> epochs,
                      std::size_t batch_size, double lr, std::uint64_t seed) {
        const auto data = for_task(ds, net.task());
        const auto cfg = train_config(net.task(), epochs, batch_size, lr, seed);
        neuralnet::TrainResult r;
        {
            py::gil_scoped_release release;
            r = neuralnet::train(net, data.train, data.test, cfg);
        }
        py::dict d;
        d["metrics"] = metrics_dict(r.metrics);
        d["history"] = history_dict(r.history);
        d["seconds"] = r.seconds;
        return d;
    }, py::arg("net"), py::arg("dataset"), py::arg("epochs") = py::none(), py::arg("batch_size") = 32,
       py::arg("lr") = 3e-4, py::arg("seed") = 0, "Train in place; returns metrics on the test split and the history");

    m.def("evaluate", [](const neuralnet::Network& net, const featurex::FeatureDataset& ds) {
        const auto data = for_task(ds, net.task());
        return metrics_dict(net.task() == Task::Classify ? neuralnet::evaluate_classifier(net, data.test)
                                                         : neuralnet::evaluate_regressor(net, data.test));
    });

    m.def("transfer", [](const neuralnet::Network& source, const std::map<double, featurex::FeatureDataset>& datasets,
                         const std::vector<std::string>& modes, const std::string& task, std::optional<int> epochs,
                         std::size_t batch_size, std::uint64_t seed, double source_length) {
        transfer::TransferPlan plan;
        plan.source_length = source_length;
        plan.target_lengths.clear();
        for (const auto& [l, _] : datasets) plan.target_lengths.push_back(l);
        plan.modes.clear();
        for (const auto& s : modes) plan.modes.push_back(transfer::mode_from_string(s));
        plan.task = neuralnet::task_from_string(task);
        plan.config = train_config(plan.task, epochs, batch_size, 3e-4, seed);
        transfer::TransferResult res;
        {
            py::gil_scoped_release release;
            res = transfer::adapt(plan, neuralnet::snapshot(source), datasets);
        }
        py::list out;
        for (const auto& o : res.outcomes) {
            py::dict d;
            d["length"] = o.length;
            d["mode"] = std::string(transfer::to_string(o.mode));
            d["metrics"] = metrics_dict(o.metrics);
            d["history"] = history_dict(o.history);
            d["seconds"] = o.seconds;
            out.append(d);
        }
        return out;
    }, py::arg("source"), py::arg("datasets"), py::arg("modes") = std::vector<std::string>{"finetune", "frozen", "dedicated"},
       py::arg("task") = "classify", py::arg("epochs") = py::none(), py::arg("batch_size") = 32, py::arg("seed") = 0,
       py::arg("source_length") = 100.0, "Adapt a source network to each {length: dataset} target");

    m.def("kmeans", [](const featurex::FeatureDataset& ds, std::size_t k, std::uint64_t seed) {
        std::vector<int> labels;
        const auto pts = baselines::feature_points(ds, &labels);
        baselines::KMeansConfig cfg;
        cfg.k = k;
        cfg.seed = seed;
        const auto model = baselines::kmeans_fit(pts, cfg);
        const auto score = baselines::cluster_accuracy(model, pts, labels);
        py::dict d;
        d["accuracy"] = score.accuracy;
        d["fraction_correct"] = score.fraction_correct;
        d["iterations"] = model.iterations;
        d["inertia"] = model.inertia;
        d["cluster_labels"] = score.mapping.label_of_cluster;
        return d;
    }, py::arg("dataset"), py::arg("k") = 11, py::arg("seed") = 0);

    m.def("latency", [](const neuralnet::Network& net, const featurex::FeatureDataset& ds, std::size_t inferences) {
        const auto s = harness::measure_inference_latency(net, ds.test, inferences);
        py::dict d;
        d["mean_us"] = s.mean_us;
        d["p99_us"] = s.p99_us;
        d["inferences"] = s.inferences;
        return d;
    }, py::arg("net"), py::arg("dataset"), py::arg("inferences") = 10000);

    m.def("run", [](const std::filesystem::path& config, std::optional<std::filesystem::path> out) {
        auto cfg = harness::load_config(config);
        if (out) cfg.output_dir = *out;
        harness::ReportBundle b;
        {
            py::gil_scoped_release release;
            b = harness::run_pipeline(cfg);
        }
        std::vector<std::string> files;
        for (const auto& f : b.files) files.push_back(f.string());
        return files;
    }, py::arg("config"), py::arg("out") = py::none(), "Run the full pipeline; returns the written report files");
}
