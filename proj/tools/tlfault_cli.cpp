// tlfault: simulate, featurize, train, transfer and report from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "tlfault/baselines.hpp"
#include "tlfault/error.hpp"
#include "tlfault/featurex.hpp"
#include "tlfault/harness.hpp"
#include "tlfault/neuralnet.hpp"
#include "tlfault/powersim.hpp"
#include "tlfault/transfer.hpp"

namespace fs = std::filesystem;
using namespace tlfault;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

struct Globals {
    std::uint64_t seed = 0;
    int repeats = 0;  // 0 = command default
    std::string out;
    bool strict_timing = false;
};

neuralnet::Task task_of(const std::string& s) { return neuralnet::task_from_string(s); }

void require_out(const Globals& g, const char* what) {
    if (g.out.empty()) throw ValidationError(std::string("--out is required for ") + what);
}

void print_metrics(const neuralnet::Metrics& m, neuralnet::Task task) {
    if (task == neuralnet::Task::Classify)
        std::cout << "accuracy " << m.accuracy << "\nfraction_correct " << m.fraction_correct << "\nprecision "
                  << m.precision << "\nrecall " << m.recall << "\nf1 " << m.f1 << "\n";
    else
        std::cout << "mse " << m.mse << "\n";
    std::cout << "samples " << m.samples << "\n";
}

std::vector<double> parse_lengths(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ValidationError("bad length '" + item + "'");
        }
        if (!powersim::is_supported_length(out.back())) throw ValidationError("unsupported line length " + item);
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transmission-line fault classification and location with transfer learning"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    Globals g;
    app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
    app.add_option("--repeats", g.repeats, "Statistical repeats (command default when omitted)");
    app.add_option("--out", g.out, "Output file or directory");
    app.add_flag("--strict-timing", g.strict_timing, "Force single-threaded execution for comparable timings");

    // simulate
    auto* sim = app.add_subcommand("simulate", "Generate a fault-scenario waveform dataset for one line length");
    double sim_length = 100.0;
    std::string sim_grid = "full";
    double sim_snr = 60.0;
    bool sim_noiseless = false;
    unsigned sim_threads = 1;
    sim->add_option("--length", sim_length, "Line length in km")->capture_default_str();
    sim->add_option("--grid", sim_grid, "Scenario grid: full, reduced or a JSON axes file")->capture_default_str();
    sim->add_option("--snr-db", sim_snr, "Noise SNR in dB")->capture_default_str();
    sim->add_flag("--noiseless", sim_noiseless, "Disable measurement noise");
    sim->add_option("--threads", sim_threads, "Worker threads")->capture_default_str();

    // features
    auto* feat = app.add_subcommand("features", "Extract normalized 7x7 frames from a waveform dataset");
    std::string feat_in;
    double feat_ratio = 0.7;
    feat->add_option("--in", feat_in, "Waveform file (.bin or .csv)")->required();
    feat->add_option("--split", feat_ratio, "Training fraction")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "Train a network on a feature dataset");
    std::string tr_dataset, tr_task = "classify", tr_history, tr_init;
    int tr_epochs = -1;
    double tr_lr = 3e-4;
    std::size_t tr_batch = 32;
    tr->add_option("--dataset", tr_dataset, "Feature dataset CSV")->required();
    tr->add_option("--task", tr_task, "classify or locate")->capture_default_str();
    tr->add_option("--epochs", tr_epochs, "Epochs (64 classify, 32 locate by default)");
    tr->add_option("--lr", tr_lr, "Adam learning rate")->capture_default_str();
    tr->add_option("--batch-size", tr_batch, "Mini-batch size")->capture_default_str();
    tr->add_option("--history", tr_history, "Write per-epoch history CSV here");

    // transfer
    auto* tf = app.add_subcommand("transfer", "Adapt a source network to other line lengths");
    std::string tf_source, tf_targets = "12.5,25,50,200,400,800", tf_mode = "finetune", tf_task = "classify",
                           tf_data_dir;
    int tf_epochs = -1;
    std::size_t tf_batch = 32;
    tf->add_option("--source-weights", tf_source, "Source weight archive")->required();
    tf->add_option("--targets", tf_targets, "Comma-separated target lengths")->capture_default_str();
    tf->add_option("--mode", tf_mode, "finetune, frozen or dedicated")->capture_default_str();
    tf->add_option("--task", tf_task, "classify or locate")->capture_default_str();
    tf->add_option("--data-dir", tf_data_dir, "Directory holding features_L<length>.csv files")->required();
    tf->add_option("--epochs", tf_epochs, "Epochs (task default when omitted)");
    tf->add_option("--batch-size", tf_batch, "Mini-batch size")->capture_default_str();

    // kmeans
    auto* km = app.add_subcommand("kmeans", "K-means clustering baseline");
    std::string km_dataset;
    std::size_t km_k = 11;
    km->add_option("--dataset", km_dataset, "Feature dataset CSV")->required();
    km->add_option("--k", km_k, "Cluster count")->capture_default_str();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score saved weights on a feature dataset's test split");
    std::string ev_weights, ev_dataset, ev_task = "classify";
    ev->add_option("--weights", ev_weights, "Weight archive")->required();
    ev->add_option("--dataset", ev_dataset, "Feature dataset CSV")->required();
    ev->add_option("--task", ev_task, "classify or locate")->capture_default_str();

    // report
    auto* rep = app.add_subcommand("report", "Regenerate tables and plot data from a run directory");
    std::string rep_dir;
    rep->add_option("--run", rep_dir, "Run directory with results.json (defaults to --out)");

    // latency
    auto* lat = app.add_subcommand("latency", "Measure per-sample inference latency");
    std::string lat_weights, lat_dataset, lat_task = "classify";
    std::size_t lat_n = 10000;
    lat->add_option("--weights", lat_weights, "Weight archive")->required();
    lat->add_option("--dataset", lat_dataset, "Feature dataset CSV")->required();
    lat->add_option("--task", lat_task, "classify or locate")->capture_default_str();
    lat->add_option("--inferences", lat_n, "Number of timed forward passes")->capture_default_str();

    // run
    auto* run = app.add_subcommand("run", "Run the full pipeline from a JSON config");
    std::string run_config;
    run->add_option("--config", run_config, "Experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (*sim) {
            require_out(g, "simulate");
            auto grid = harness::grid_from_spec(sim_grid);
            grid.snr_db = sim_noiseless ? std::nullopt : std::optional(sim_snr);
            powersim::LineParams lp;
            lp.length = sim_length;
            const auto recs = powersim::generate_grid(lp, grid, g.seed, g.strict_timing ? 1u : sim_threads);
            if (fs::path(g.out).extension() == ".csv")
                powersim::write_waveforms_csv(g.out, recs);
            else
                powersim::write_waveforms_binary(g.out, recs);
            std::cout << "wrote " << recs.size() << " records to " << g.out << "\n";
        } else if (*feat) {
            require_out(g, "features");
            const auto ds = featurex::build_dataset(powersim::read_waveforms(feat_in), feat_ratio, g.seed);
            featurex::write_dataset(g.out, ds);
            std::cout << "wrote " << ds.train.size() << " train / " << ds.test.size() << " test samples to " << g.out
                      << "\n";
        } else if (*tr) {
            require_out(g, "train");
            const auto task = task_of(tr_task);
            auto ds = featurex::read_dataset(tr_dataset);
            if (task == neuralnet::Task::Locate) ds = featurex::faulted_only(ds);
            auto cfg = task == neuralnet::Task::Classify ? neuralnet::TrainConfig::classification(g.seed)
                                                         : neuralnet::TrainConfig::location(g.seed);
            if (tr_epochs > 0) cfg.epochs = tr_epochs;
            cfg.learning_rate = tr_lr;
            cfg.batch_size = tr_batch;
            neuralnet::Network net(neuralnet::NetSpec::lenet(task), g.seed);
            const auto res = neuralnet::train(net, ds.train, ds.test, cfg);
            neuralnet::save_weights(net, g.out);
            if (!tr_history.empty()) {
                std::ofstream os(tr_history);
                os << "epoch,train,validation,train_loss\n";
                for (std::size_t e = 0; e < res.history.train.size(); ++e)
                    os << e + 1 << ',' << res.history.train[e] << ','
                       << (e < res.history.validation.size() ? res.history.validation[e] : 0.0) << ','
                       << res.history.train_loss[e] << '\n';
            }
            print_metrics(res.metrics, task);
            std::cout << "train_seconds " << res.seconds << "\n";
        } else if (*tf) {
            require_out(g, "transfer");
            transfer::TransferPlan plan;
            plan.task = task_of(tf_task);
            plan.modes = {transfer::mode_from_string(tf_mode)};
            plan.target_lengths = parse_lengths(tf_targets);
            plan.config = plan.task == neuralnet::Task::Classify ? neuralnet::TrainConfig::classification()
                                                                 : neuralnet::TrainConfig::location();
            if (tf_epochs > 0) plan.config.epochs = tf_epochs;
            plan.config.batch_size = tf_batch;
            plan.validate();
            std::map<double, featurex::FeatureDataset> data;
            for (double l : plan.target_lengths)
                data[l] = featurex::read_dataset(fs::path(tf_data_dir) / ("features_L" + harness::length_tag(l) + ".csv"));
            const auto archive = neuralnet::read_archive(tf_source);
            const int repeats = g.repeats > 0 ? g.repeats : 30;
            harness::PipelineResults results;
            results.config.repeats = repeats;
            results.config.master_seed = g.seed;
            for (int r = 1; r <= repeats; ++r) {
                plan.config.seed = g.seed + static_cast<std::uint64_t>(r);
                const auto res = transfer::adapt(plan, archive, data);
                for (const auto& o : res.outcomes)
                    results.runs.push_back({plan.task, o.length, o.mode, plan.config.seed, o.metrics.accuracy,
                                            o.metrics.fraction_correct, o.metrics.precision, o.metrics.recall,
                                            o.metrics.f1, o.metrics.mse, o.history, o.seconds});
            }
            harness::save_results(g.out, results);
            const auto bundle = harness::write_reports(g.out, results);
            std::cout << "wrote " << bundle.files.size() << " report files to " << g.out << "\n";
        } else if (*km) {
            require_out(g, "kmeans");
            const auto ds = featurex::read_dataset(km_dataset);
            std::vector<int> labels;
            const auto pts = baselines::feature_points(ds, &labels);
            const int repeats = g.repeats > 0 ? g.repeats : 30;
            std::vector<harness::KMeansRecord> recs;
            for (int r = 1; r <= repeats; ++r) {
                baselines::KMeansConfig kc;
                kc.k = km_k;
                kc.seed = g.seed + static_cast<std::uint64_t>(r);
                const auto model = baselines::kmeans_fit(pts, kc);
                const auto score = baselines::cluster_accuracy(model, pts, labels);
                recs.push_back({ds.length, kc.seed, score.accuracy, score.fraction_correct, model.iterations, model.inertia});
            }
            const auto row = harness::kmeans_table(recs).front();
            std::ofstream os(g.out);
            os << "length_km,repeats,accuracy_mean,accuracy_std,fraction_correct_mean,iterations_mean,iterations_min,"
                  "iterations_max\n"
               << ds.length << ',' << repeats << ',' << row.accuracy.mean << ',' << row.accuracy.std << ','
               << row.fraction_correct.mean << ',' << row.iterations.mean << ',' << row.min_iterations << ','
               << row.max_iterations << '\n';
            std::cout << "accuracy " << row.accuracy.mean << " ± " << row.accuracy.std << "\n";
        } else if (*ev) {
            const auto task = task_of(ev_task);
            auto ds = featurex::read_dataset(ev_dataset);
            if (task == neuralnet::Task::Locate) ds = featurex::faulted_only(ds);
            const auto net = neuralnet::load_weights(ev_weights, neuralnet::NetSpec::lenet(task));
            print_metrics(task == neuralnet::Task::Classify ? neuralnet::evaluate_classifier(net, ds.test)
                                                            : neuralnet::evaluate_regressor(net, ds.test),
                          task);
        } else if (*rep) {
            const std::string dir = rep_dir.empty() ? g.out : rep_dir;
            if (dir.empty()) throw ValidationError("report needs --run or --out");
            const auto results = harness::load_results(dir);
            const auto bundle = harness::write_reports(g.out.empty() ? dir : g.out, results);
            std::cout << "wrote " << bundle.files.size() << " report files\n";
        } else if (*lat) {
            const auto task = task_of(lat_task);
            const auto ds = featurex::read_dataset(lat_dataset);
            const auto net = neuralnet::load_weights(lat_weights, neuralnet::NetSpec::lenet(task));
            const auto s = harness::measure_inference_latency(net, ds.test, lat_n);
            std::cout << "inferences " << s.inferences << "\nmean_us " << s.mean_us << "\np99_us " << s.p99_us << "\n";
        } else if (*run) {
            auto cfg = harness::load_config(run_config);
            if (app.get_option("--seed")->count()) cfg.master_seed = g.seed;
            if (g.repeats > 0) cfg.repeats = g.repeats;
            if (!g.out.empty()) cfg.output_dir = g.out;
            if (g.strict_timing) cfg.strict_timing = true;
            const auto bundle = harness::run_pipeline(cfg);
            std::cout << "wrote " << bundle.files.size() << " files to " << cfg.output_dir.string() << "\n";
        }
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ArchiveError& e) {
        std::cerr << "archive error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << "\n";
        return kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
    return 0;
}
