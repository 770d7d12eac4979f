#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tlfault/featurex.hpp"

namespace tlfault::neuralnet {

enum class Task { Classify, Locate };
enum class Activation { None, Relu };
enum class LossKind { CrossEntropy, MeanSquaredError };

std::string_view to_string(Task t);
Task task_from_string(std::string_view s);

struct Shape {
    std::size_t channels = 1, height = 1, width = 1;
    std::size_t size() const { return channels * height * width; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

/// Trainable tensor. Frozen parameters get no gradient storage and are never updated.
struct Param {
    std::string name;  // "<layer>.weight" / "<layer>.bias"
    std::vector<std::size_t> dims;
    std::vector<double> value;
    bool frozen = false;
};

/// Gradient per parameter, aligned with Network::params(); empty for frozen parameters.
using Gradients = std::vector<std::vector<double>>;

class Layer {
public:
    virtual ~Layer() = default;

    const std::string& name() const { return name_; }
    const Shape& input_shape() const { return in_; }
    const Shape& output_shape() const { return out_; }

    virtual void forward(std::span<const double> in, std::span<double> out) const = 0;
    /// `grad_out` is d loss / d output (post-activation). `grad_in` may be empty when the
    /// caller does not need the upstream error. `grads` receives accumulated parameter
    /// gradients (entries for frozen parameters are skipped).
    virtual void backward(std::span<const double> in, std::span<const double> out,
                          std::span<const double> grad_out, std::span<double> grad_in,
                          std::span<std::vector<double>> grads) const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    bool trainable() const;
    void set_frozen(bool frozen);

protected:
    Layer(std::string name, Shape in, Shape out) : name_(std::move(name)), in_(in), out_(out) {}

    std::string name_;
    Shape in_;
    Shape out_;
    std::vector<Param> params_;
};

// Layer descriptions. Convolutions are "valid" with stride 1.
struct ConvSpec {
    std::string name;
    std::size_t filters;
    std::size_t kernel;
    Activation activation = Activation::Relu;
};
struct PoolSpec {
    std::string name;
    std::size_t size;
    std::size_t stride;
};
struct FlattenSpec {
    std::string name = "flatten";
};
struct DenseSpec {
    std::string name;
    std::size_t units;
    Activation activation = Activation::Relu;
};
using LayerSpec = std::variant<ConvSpec, PoolSpec, FlattenSpec, DenseSpec>;

struct NetSpec {
    Shape input{1, 7, 7};
    std::vector<LayerSpec> layers;
    Task task = Task::Classify;  // Classify applies softmax to the last layer's output

    /// C1 conv 6@3x3, S2 avgpool 2/1, C3 conv 16@3x3, S4 avgpool 2/2, flatten, F5 120, F6 84,
    /// head 11 (softmax) or 1 (linear).
    static NetSpec lenet(Task task);
};

/// Names of the feature-extractor layers (convolution and pooling).
inline constexpr std::array<std::string_view, 4> kExtractorLayers{"C1", "S2", "C3", "S4"};

class Network {
public:
    /// He-uniform weights (limit sqrt(6 / fan_in)) and zero biases drawn from `seed`.
    Network(const NetSpec& spec, std::uint64_t seed);
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const NetSpec& spec() const { return spec_; }
    Task task() const { return spec_.task; }
    std::size_t input_size() const { return spec_.input.size(); }
    std::size_t output_size() const { return layers_.back()->output_shape().size(); }
    std::size_t layer_count() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_[i]; }
    const Layer& layer(std::size_t i) const { return *layers_[i]; }
    Layer& layer(std::string_view name);
    const Layer& layer(std::string_view name) const;
    std::optional<std::size_t> layer_index(std::string_view name) const;

    /// Probabilities (classification) or the scalar prediction (regression).
    std::vector<double> forward(std::span<const double> input) const;
    /// Runs layers [first, last) on `input`, which must match layer `first`'s input shape.
    /// Softmax is applied only when `last` is the final layer of a classifier.
    std::vector<double> forward_range(std::span<const double> input, std::size_t first, std::size_t last) const;
    int predict_class(std::span<const double> input) const;

    /// Pointers into every layer's parameters in layer order (weight before bias).
    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    std::size_t parameter_count() const;
    Gradients make_gradients() const;

    void set_frozen(std::string_view layer, bool frozen);
    void freeze_all(bool frozen);
    /// Redraws a layer's weights from a fresh seed (biases reset to zero).
    void reinitialize(std::string_view layer, std::uint64_t seed);
    /// Index of the first layer owning a trainable parameter, or layer_count() if none.
    std::size_t first_trainable_layer() const;

    /// Loss for one example and accumulates d loss / d param into `grads` (scaled by `scale`).
    /// Classification targets are the class label; regression targets the real value.
    double loss_and_gradients(std::span<const double> input, double target, Gradients& grads,
                              double scale = 1.0) const;
    double loss(std::span<const double> input, double target) const;

    const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

private:
    void build(std::uint64_t seed);

    NetSpec spec_;
    std::vector<std::unique_ptr<Layer>> layers_;
};

LossKind default_loss(Task t);

/// Softmax cross-entropy (label) or squared error (value) for a network output vector.
double output_loss(Task task, std::span<const double> output, double target);

// ---------------------------------------------------------------------------
// Optimization

struct TrainConfig {
    int epochs = 64;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::CrossEntropy;
    bool track_validation = true;

    static TrainConfig classification(std::uint64_t seed = 0);
    static TrainConfig location(std::uint64_t seed = 0);
    void validate() const;
};

struct AdamState {
    Gradients m;
    Gradients v;
    long step = 0;

    explicit AdamState(const Network& net);
};

/// Bias-corrected Adam update of every non-frozen parameter.
void adam_step(Network& net, AdamState& state, const Gradients& grads, const TrainConfig& cfg);

struct ClassCounts {
    long tp = 0, tn = 0, fp = 0, fn = 0;
};

struct Metrics {
    std::vector<ClassCounts> per_class;
    double accuracy = 0.0;        // (TP+TN)/(TP+TN+FP+FN) over the summed one-vs-rest counts
    double fraction_correct = 0.0;  // plain top-1 accuracy
    double precision = 0.0;       // macro over classes present in the data
    double recall = 0.0;
    double f1 = 0.0;
    double mse = 0.0;
    double train_seconds = 0.0;
    std::size_t samples = 0;
    std::vector<int> excluded_classes;  // absent from the evaluated set
};

Metrics classification_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes);
Metrics evaluate_classifier(const Network& net, std::span<const featurex::Sample> test);
Metrics evaluate_regressor(const Network& net, std::span<const featurex::Sample> test);

struct TrainHistory {
    std::vector<double> train;       // accuracy (classify) or mse (locate) per epoch
    std::vector<double> validation;  // same metric on the validation set; empty if not tracked
    std::vector<double> train_loss;
};

struct TrainResult {
    TrainHistory history;
    Metrics metrics;  // on the validation set
    double seconds = 0.0;
};

/// Mini-batch Adam with per-epoch seeded shuffling. Frozen leading layers are evaluated once
/// per sample up front and their outputs reused across epochs. Timing covers this function
/// only (no data preparation by the caller).
TrainResult train(Network& net, std::span<const featurex::Sample> train_set,
                  std::span<const featurex::Sample> val_set, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Weight archive: "TLXD", u16 version, u32 entry count, entries, u32 CRC-32 of all prior bytes.
// Entry: u32 name length, name, u32 rank, u64 dims[rank], u8 frozen, f64 values.

inline constexpr std::uint16_t kArchiveVersion = 1;

struct ArchiveEntry {
    std::string name;
    std::vector<std::size_t> dims;
    std::vector<double> values;
    bool frozen = false;
};

struct WeightArchive {
    std::uint16_t version = kArchiveVersion;
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(std::string_view name) const;
};

WeightArchive snapshot(const Network& net);
std::vector<std::uint8_t> encode(const WeightArchive& archive);
WeightArchive decode(std::span<const std::uint8_t> bytes);

struct LayerCompatibility {
    std::string layer;
    bool accepted = false;
    std::string reason;
};

/// Per-layer shape check of `archive` against `net` (only layers with parameters).
std::vector<LayerCompatibility> check_compatibility(const Network& net, const WeightArchive& archive);

/// Copies values and freeze flags for the named layers (all parameterized layers if empty).
/// Throws ArchiveError naming the first incompatible layer; `net` is untouched on error.
void load_into(Network& net, const WeightArchive& archive, std::span<const std::string> layers = {});

void save_weights(const Network& net, const std::filesystem::path& path);
WeightArchive read_archive(const std::filesystem::path& path);
Network load_weights(const std::filesystem::path& path, const NetSpec& spec);

} // namespace tlfault::neuralnet
