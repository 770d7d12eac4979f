#include "tlfault/neuralnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <zlib.h>

#include "binary_io.hpp"
#include "tlfault/error.hpp"

namespace tlfault::neuralnet {

using featurex::Sample;

std::string_view to_string(Task t) { return t == Task::Classify ? "classify" : "locate"; }

Task task_from_string(std::string_view s) {
    if (s == "classify") return Task::Classify;
    if (s == "locate") return Task::Locate;
    throw ValidationError("task must be 'classify' or 'locate', got '" + std::string(s) + "'");
}

LossKind default_loss(Task t) { return t == Task::Classify ? LossKind::CrossEntropy : LossKind::MeanSquaredError; }

bool Layer::trainable() const {
    return std::any_of(params_.begin(), params_.end(), [](const Param& p) { return !p.frozen; });
}

void Layer::set_frozen(bool frozen) {
    for (Param& p : params_) p.frozen = frozen;
}

namespace {

double activate(Activation a, double x) { return a == Activation::Relu ? (x > 0.0 ? x : 0.0) : x; }

// d out / d pre-activation, expressed through the post-activation value.
double activation_slope(Activation a, double out) { return a == Activation::Relu ? (out > 0.0 ? 1.0 : 0.0) : 1.0; }

class Conv2D final : public Layer {
public:
    Conv2D(const ConvSpec& s, Shape in)
        : Layer(s.name, in, Shape{s.filters, in.height - s.kernel + 1, in.width - s.kernel + 1}),
          kernel_(s.kernel), act_(s.activation) {
        if (s.kernel == 0 || s.kernel > in.height || s.kernel > in.width)
            throw ValidationError("conv layer " + s.name + ": kernel does not fit its input");
        params_.push_back({name_ + ".weight", {s.filters, in.channels, s.kernel, s.kernel},
                           std::vector<double>(s.filters * in.channels * s.kernel * s.kernel), false});
        params_.push_back({name_ + ".bias", {s.filters}, std::vector<double>(s.filters), false});
    }

    void forward(std::span<const double> in, std::span<double> out) const override {
        const auto& w = params_[0].value;
        const auto& b = params_[1].value;
        const std::size_t C = in_.channels, H = in_.height, W = in_.width;
        const std::size_t OH = out_.height, OW = out_.width, K = kernel_;
        for (std::size_t f = 0; f < out_.channels; ++f)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t x = 0; x < OW; ++x) {
                    double acc = b[f];
                    for (std::size_t c = 0; c < C; ++c) {
                        const double* wk = &w[((f * C + c) * K) * K];
                        const double* src = &in[(c * H + y) * W + x];
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) acc += wk[ky * K + kx] * src[ky * W + kx];
                    }
                    out[(f * OH + y) * OW + x] = activate(act_, acc);
                }
    }

    void backward(std::span<const double> in, std::span<const double> out, std::span<const double> grad_out,
                  std::span<double> grad_in, std::span<std::vector<double>> grads) const override {
        const auto& w = params_[0].value;
        const std::size_t C = in_.channels, H = in_.height, W = in_.width;
        const std::size_t OH = out_.height, OW = out_.width, K = kernel_;
        std::vector<double>& gw = grads[0];
        std::vector<double>& gb = grads[1];
        if (!grad_in.empty()) std::fill(grad_in.begin(), grad_in.end(), 0.0);
        for (std::size_t f = 0; f < out_.channels; ++f)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t x = 0; x < OW; ++x) {
                    const std::size_t o = (f * OH + y) * OW + x;
                    const double delta = grad_out[o] * activation_slope(act_, out[o]);
                    if (delta == 0.0) continue;
                    if (!gb.empty()) gb[f] += delta;
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t wbase = ((f * C + c) * K) * K;
                        const std::size_t ibase = (c * H + y) * W + x;
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                if (!gw.empty()) gw[wbase + ky * K + kx] += delta * in[ibase + ky * W + kx];
                                if (!grad_in.empty()) grad_in[ibase + ky * W + kx] += delta * w[wbase + ky * K + kx];
                            }
                    }
                }
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2D>(*this); }

private:
    std::size_t kernel_;
    Activation act_;
};

class AvgPool2D final : public Layer {
public:
    AvgPool2D(const PoolSpec& s, Shape in)
        : Layer(s.name, in, Shape{in.channels, (in.height - s.size) / s.stride + 1, (in.width - s.size) / s.stride + 1}),
          size_(s.size), stride_(s.stride) {
        if (s.size == 0 || s.stride == 0 || s.size > in.height || s.size > in.width)
            throw ValidationError("pool layer " + s.name + ": window does not fit its input");
    }

    void forward(std::span<const double> in, std::span<double> out) const override {
        const double inv = 1.0 / static_cast<double>(size_ * size_);
        for (std::size_t c = 0; c < out_.channels; ++c)
            for (std::size_t y = 0; y < out_.height; ++y)
                for (std::size_t x = 0; x < out_.width; ++x) {
                    double acc = 0.0;
                    for (std::size_t dy = 0; dy < size_; ++dy)
                        for (std::size_t dx = 0; dx < size_; ++dx)
                            acc += in[(c * in_.height + y * stride_ + dy) * in_.width + x * stride_ + dx];
                    out[(c * out_.height + y) * out_.width + x] = acc * inv;
                }
    }

    void backward(std::span<const double>, std::span<const double>, std::span<const double> grad_out,
                  std::span<double> grad_in, std::span<std::vector<double>>) const override {
        if (grad_in.empty()) return;
        std::fill(grad_in.begin(), grad_in.end(), 0.0);
        const double inv = 1.0 / static_cast<double>(size_ * size_);
        for (std::size_t c = 0; c < out_.channels; ++c)
            for (std::size_t y = 0; y < out_.height; ++y)
                for (std::size_t x = 0; x < out_.width; ++x) {
                    const double g = grad_out[(c * out_.height + y) * out_.width + x] * inv;
                    for (std::size_t dy = 0; dy < size_; ++dy)
                        for (std::size_t dx = 0; dx < size_; ++dx)
                            grad_in[(c * in_.height + y * stride_ + dy) * in_.width + x * stride_ + dx] += g;
                }
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2D>(*this); }

private:
    std::size_t size_;
    std::size_t stride_;
};

class Flatten final : public Layer {
public:
    Flatten(const FlattenSpec& s, Shape in) : Layer(s.name, in, Shape{in.size(), 1, 1}) {}

    void forward(std::span<const double> in, std::span<double> out) const override {
        std::copy(in.begin(), in.end(), out.begin());
    }
    void backward(std::span<const double>, std::span<const double>, std::span<const double> grad_out,
                  std::span<double> grad_in, std::span<std::vector<double>>) const override {
        if (!grad_in.empty()) std::copy(grad_out.begin(), grad_out.end(), grad_in.begin());
    }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
};

class Dense final : public Layer {
public:
    Dense(const DenseSpec& s, Shape in) : Layer(s.name, in, Shape{s.units, 1, 1}), act_(s.activation) {
        if (s.units == 0) throw ValidationError("dense layer " + s.name + " has no units");
        params_.push_back({name_ + ".weight", {s.units, in.size()}, std::vector<double>(s.units * in.size()), false});
        params_.push_back({name_ + ".bias", {s.units}, std::vector<double>(s.units), false});
    }

    void forward(std::span<const double> in, std::span<double> out) const override {
        const auto& w = params_[0].value;
        const auto& b = params_[1].value;
        const std::size_t n = in_.size();
        for (std::size_t o = 0; o < out_.size(); ++o) {
            const double* row = &w[o * n];
            double acc = b[o];
            for (std::size_t i = 0; i < n; ++i) acc += row[i] * in[i];
            out[o] = activate(act_, acc);
        }
    }

    void backward(std::span<const double> in, std::span<const double> out, std::span<const double> grad_out,
                  std::span<double> grad_in, std::span<std::vector<double>> grads) const override {
        const auto& w = params_[0].value;
        const std::size_t n = in_.size();
        std::vector<double>& gw = grads[0];
        std::vector<double>& gb = grads[1];
        if (!grad_in.empty()) std::fill(grad_in.begin(), grad_in.end(), 0.0);
        for (std::size_t o = 0; o < out_.size(); ++o) {
            const double delta = grad_out[o] * activation_slope(act_, out[o]);
            if (delta == 0.0) continue;
            if (!gb.empty()) gb[o] += delta;
            if (!gw.empty()) {
                double* grow = &gw[o * n];
                for (std::size_t i = 0; i < n; ++i) grow[i] += delta * in[i];
            }
            if (!grad_in.empty()) {
                const double* row = &w[o * n];
                for (std::size_t i = 0; i < n; ++i) grad_in[i] += delta * row[i];
            }
        }
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

private:
    Activation act_;
};

void softmax_in_place(std::span<double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& x : z) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : z) x /= sum;
}

void he_uniform(Param& weight, std::size_t fan_in, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& x : weight.value) x = dist(rng);
}

std::size_t fan_in_of(const Param& weight) {
    std::size_t f = 1;
    for (std::size_t i = 1; i < weight.dims.size(); ++i) f *= weight.dims[i];
    return f;
}

std::uint64_t layer_seed(std::uint64_t seed, std::string_view name) {
    const auto name_hash = crc32(0L, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(name_hash)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

} // namespace

// ---------------------------------------------------------------------------

NetSpec NetSpec::lenet(Task task) {
    NetSpec s;
    s.input = {1, 7, 7};
    s.task = task;
    s.layers = {
        ConvSpec{"C1", 6, 3, Activation::Relu},
        PoolSpec{"S2", 2, 1},
        ConvSpec{"C3", 16, 3, Activation::Relu},
        PoolSpec{"S4", 2, 2},
        FlattenSpec{"flatten"},
        DenseSpec{"F5", 120, Activation::Relu},
        DenseSpec{"F6", 84, Activation::Relu},
        DenseSpec{"head", task == Task::Classify ? std::size_t{kNumClasses} : std::size_t{1}, Activation::None},
    };
    return s;
}

Network::Network(const NetSpec& spec, std::uint64_t seed) : spec_(spec) { build(seed); }

Network::Network(const Network& other) : spec_(other.spec_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        Network tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

void Network::build(std::uint64_t seed) {
    if (spec_.layers.empty()) throw ValidationError("network spec has no layers");
    Shape shape = spec_.input;
    for (const LayerSpec& ls : spec_.layers) {
        std::unique_ptr<Layer> layer = std::visit(
            [&](const auto& s) -> std::unique_ptr<Layer> {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, ConvSpec>) return std::make_unique<Conv2D>(s, shape);
                if constexpr (std::is_same_v<T, PoolSpec>) return std::make_unique<AvgPool2D>(s, shape);
                if constexpr (std::is_same_v<T, FlattenSpec>) return std::make_unique<Flatten>(s, shape);
                if constexpr (std::is_same_v<T, DenseSpec>) {
                    if (shape.height != 1 || shape.width != 1)
                        throw ValidationError("dense layer " + s.name + " needs a flattened input");
                    return std::make_unique<Dense>(s, shape);
                }
            },
            ls);
        shape = layer->output_shape();
        layers_.push_back(std::move(layer));
    }
    if (spec_.task == Task::Locate && shape.size() != 1)
        throw ValidationError("regression network must end in a single output");
    for (auto& l : layers_) reinitialize(l->name(), seed);
}

Layer& Network::layer(std::string_view name) {
    const auto idx = layer_index(name);
    if (!idx) throw ValidationError("no layer named '" + std::string(name) + "'");
    return *layers_[*idx];
}

const Layer& Network::layer(std::string_view name) const {
    return const_cast<Network*>(this)->layer(name);
}

std::optional<std::size_t> Network::layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i]->name() == name) return i;
    return std::nullopt;
}

std::vector<double> Network::forward_range(std::span<const double> input, std::size_t first, std::size_t last) const {
    if (first > last || last > layers_.size()) throw ValidationError("invalid layer range");
    if (first == last) return {input.begin(), input.end()};
    if (input.size() != layers_[first]->input_shape().size())
        throw ValidationError("input has " + std::to_string(input.size()) + " values; layer " + layers_[first]->name() +
                              " expects " + std::to_string(layers_[first]->input_shape().size()));
    std::vector<double> cur(input.begin(), input.end());
    std::vector<double> next;
    for (std::size_t i = first; i < last; ++i) {
        next.assign(layers_[i]->output_shape().size(), 0.0);
        layers_[i]->forward(cur, next);
        cur.swap(next);
    }
    if (last == layers_.size() && spec_.task == Task::Classify) softmax_in_place(cur);
    return cur;
}

std::vector<double> Network::forward(std::span<const double> input) const {
    return forward_range(input, 0, layers_.size());
}

int Network::predict_class(std::span<const double> input) const {
    const auto p = forward(input);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<Param*> Network::params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
        for (auto& p : l->params()) out.push_back(&p);
    return out;
}

std::vector<const Param*> Network::params() const {
    std::vector<const Param*> out;
    for (const auto& l : layers_)
        for (const auto& p : l->params()) out.push_back(&p);
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const Param* p : params()) n += p->value.size();
    return n;
}

Gradients Network::make_gradients() const {
    Gradients g;
    for (const Param* p : params()) g.emplace_back(p->frozen ? 0 : p->value.size(), 0.0);
    return g;
}

void Network::set_frozen(std::string_view name, bool frozen) { layer(name).set_frozen(frozen); }

void Network::freeze_all(bool frozen) {
    for (auto& l : layers_) l->set_frozen(frozen);
}

void Network::reinitialize(std::string_view name, std::uint64_t seed) {
    Layer& l = layer(name);
    if (l.params().empty()) return;
    std::mt19937_64 rng(layer_seed(seed, name));
    he_uniform(l.params()[0], fan_in_of(l.params()[0]), rng);
    std::fill(l.params()[1].value.begin(), l.params()[1].value.end(), 0.0);
}

std::size_t Network::first_trainable_layer() const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i]->trainable()) return i;
    return layers_.size();
}

double output_loss(Task task, std::span<const double> output, double target) {
    if (task == Task::Classify) {
        const auto label = static_cast<std::size_t>(target);
        return -std::log(std::max(output[label], 1e-300));
    }
    const double e = output[0] - target;
    return e * e;
}

namespace {

// Forward over layers [first, L) keeping every activation, then backward down to `first`.
struct Pass {
    std::vector<std::vector<double>> acts;  // acts[k] is the input of layer first+k
    std::vector<double> grad_a;
    std::vector<double> grad_b;
};

double run_pass(const std::vector<std::unique_ptr<Layer>>& layers, Task task, std::size_t first,
                std::span<const double> input, double target, Gradients& grads, std::span<const std::size_t> offsets,
                double scale, Pass& pass, std::vector<double>* output) {
    const std::size_t L = layers.size();
    pass.acts.resize(L - first + 1);
    pass.acts[0].assign(input.begin(), input.end());
    for (std::size_t i = first; i < L; ++i) {
        auto& out = pass.acts[i - first + 1];
        out.resize(layers[i]->output_shape().size());
        layers[i]->forward(pass.acts[i - first], out);
    }
    const auto& last = pass.acts.back();
    double loss;
    auto& g = pass.grad_a;
    g.assign(last.size(), 0.0);
    if (task == Task::Classify) {
        std::vector<double> p(last.begin(), last.end());
        softmax_in_place(p);
        const auto label = static_cast<std::size_t>(target);
        loss = -std::log(std::max(p[label], 1e-300));
        for (std::size_t k = 0; k < p.size(); ++k) g[k] = scale * (p[k] - (k == label ? 1.0 : 0.0));
        if (output) *output = std::move(p);
    } else {
        const double e = last[0] - target;
        loss = e * e;
        g[0] = scale * 2.0 * e;
        if (output) *output = {last[0]};
    }
    for (std::size_t i = L; i-- > first;) {
        const bool need_upstream = i > first;
        pass.grad_b.assign(need_upstream ? layers[i]->input_shape().size() : 0, 0.0);
        std::span<std::vector<double>> layer_grads(grads.data() + offsets[i], layers[i]->params().size());
        layers[i]->backward(pass.acts[i - first], pass.acts[i - first + 1], g, pass.grad_b, layer_grads);
        std::swap(g, pass.grad_b);
    }
    return loss;
}

std::vector<std::size_t> param_offsets(const std::vector<std::unique_ptr<Layer>>& layers) {
    std::vector<std::size_t> off(layers.size() + 1, 0);
    for (std::size_t i = 0; i < layers.size(); ++i) off[i + 1] = off[i] + layers[i]->params().size();
    return off;
}

} // namespace

double Network::loss_and_gradients(std::span<const double> input, double target, Gradients& grads,
                                   double scale) const {
    if (input.size() != input_size()) throw ValidationError("input size does not match the network");
    if (grads.size() != params().size()) throw ValidationError("gradient set does not match the network");
    Pass pass;
    const auto offsets = param_offsets(layers_);
    // Backward must reach layer 0 whenever anything trainable sits there; otherwise it stops at
    // the first trainable layer since nothing below can receive a gradient.
    const std::size_t first = std::min(first_trainable_layer(), layers_.size() - 1);
    std::vector<double> prefix = forward_range(input, 0, first);
    return run_pass(layers_, spec_.task, first, prefix, target, grads, offsets, scale, pass, nullptr);
}

double Network::loss(std::span<const double> input, double target) const {
    return output_loss(spec_.task, forward(input), target);
}

// ---------------------------------------------------------------------------

TrainConfig TrainConfig::classification(std::uint64_t seed) {
    TrainConfig c;
    c.epochs = 64;
    c.seed = seed;
    c.loss = LossKind::CrossEntropy;
    return c;
}

TrainConfig TrainConfig::location(std::uint64_t seed) {
    TrainConfig c;
    c.epochs = 32;
    c.seed = seed;
    c.loss = LossKind::MeanSquaredError;
    return c;
}

void TrainConfig::validate() const {
    if (epochs <= 0) throw ValidationError("epochs must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (batch_size == 0) throw ValidationError("batch size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must lie in [0, 1)");
}

AdamState::AdamState(const Network& net) : m(net.make_gradients()), v(net.make_gradients()) {}

void adam_step(Network& net, AdamState& state, const Gradients& grads, const TrainConfig& cfg) {
    auto params = net.params();
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw ValidationError("optimizer state does not match the network");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        if (p.frozen || grads[i].empty()) continue;
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.value.size()) {
            m.assign(p.value.size(), 0.0);
            v.assign(p.value.size(), 0.0);
        }
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.value[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------

Metrics classification_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
    if (truth.size() != predicted.size()) throw ValidationError("truth and prediction lengths differ");
    if (truth.empty()) throw ValidationError("cannot score an empty set");
    Metrics m;
    m.samples = truth.size();
    m.per_class.assign(static_cast<std::size_t>(num_classes), {});
    long correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
            throw ValidationError("class label out of range");
        if (truth[i] == predicted[i]) ++correct;
    }
    const long n = static_cast<long>(truth.size());
    for (int k = 0; k < num_classes; ++k) {
        ClassCounts& c = m.per_class[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool t = truth[i] == k;
            const bool p = predicted[i] == k;
            c.tp += t && p;
            c.fp += !t && p;
            c.fn += t && !p;
        }
        c.tn = n - c.tp - c.fp - c.fn;
    }

    long agree = 0;
    long total = 0;
    double psum = 0.0, rsum = 0.0, fsum = 0.0;
    int present = 0;
    for (int k = 0; k < num_classes; ++k) {
        const ClassCounts& c = m.per_class[static_cast<std::size_t>(k)];
        agree += c.tp + c.tn;
        total += c.tp + c.tn + c.fp + c.fn;
        if (c.tp + c.fn == 0) {
            m.excluded_classes.push_back(k);
            continue;
        }
        const double p = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
        const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
        psum += p;
        rsum += r;
        fsum += p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        ++present;
    }
    if (!m.excluded_classes.empty())
        std::clog << "warning: " << m.excluded_classes.size()
                  << " class(es) absent from the evaluated set; excluded from macro averages\n";
    m.accuracy = static_cast<double>(agree) / static_cast<double>(total);
    m.fraction_correct = static_cast<double>(correct) / static_cast<double>(n);
    m.precision = psum / present;
    m.recall = rsum / present;
    m.f1 = fsum / present;
    return m;
}

Metrics evaluate_classifier(const Network& net, std::span<const Sample> test) {
    if (net.task() != Task::Classify) throw ValidationError("evaluate_classifier needs a classification network");
    if (test.empty()) throw ValidationError("test set is empty");
    std::vector<int> truth;
    std::vector<int> pred;
    for (const Sample& s : test) {
        truth.push_back(s.class_label);
        pred.push_back(net.predict_class(s.frame));
    }
    return classification_metrics(truth, pred, static_cast<int>(net.output_size()));
}

Metrics evaluate_regressor(const Network& net, std::span<const Sample> test) {
    if (net.task() != Task::Locate) throw ValidationError("evaluate_regressor needs a regression network");
    if (test.empty()) throw ValidationError("test set is empty");
    Metrics m;
    m.samples = test.size();
    double acc = 0.0;
    for (const Sample& s : test) {
        if (!s.faulted()) throw ValidationError("location evaluation received a no-fault sample");
        const double e = net.forward(s.frame)[0] - s.location;
        acc += e * e;
    }
    m.mse = acc / static_cast<double>(test.size());
    return m;
}

// ---------------------------------------------------------------------------

TrainResult train(Network& net, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw ValidationError("training set is empty");
    const Task task = net.task();
    if ((task == Task::Classify) != (cfg.loss == LossKind::CrossEntropy))
        throw ValidationError("loss kind does not match the network head");
    for (const Sample& s : train_set)
        if (task == Task::Locate && !s.faulted()) throw ValidationError("location training received a no-fault sample");

    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t L = net.layer_count();
    const std::size_t first = net.first_trainable_layer();
    const std::size_t start = std::min(first, L - 1);
    const auto offsets = param_offsets(net.layers());

    auto target_of = [&](const Sample& s) { return task == Task::Classify ? static_cast<double>(s.class_label) : s.location; };

    // Outputs of the frozen prefix never change during training.
    auto prefix_cache = [&](std::span<const Sample> set) {
        std::vector<std::vector<double>> cache;
        cache.reserve(set.size());
        for (const Sample& s : set) cache.push_back(net.forward_range(s.frame, 0, start));
        return cache;
    };
    const auto train_in = prefix_cache(train_set);
    const auto val_in = cfg.track_validation ? prefix_cache(val_set) : std::vector<std::vector<double>>{};

    TrainResult result;
    AdamState adam(net);
    Gradients grads = net.make_gradients();
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Pass pass;
    std::vector<double> out;

    auto score_val = [&]() {
        double metric = 0.0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
            const auto o = net.forward_range(val_in[i], start, L);
            if (task == Task::Classify) {
                const int k = static_cast<int>(std::max_element(o.begin(), o.end()) - o.begin());
                metric += k == val_set[i].class_label ? 1.0 : 0.0;
            } else {
                const double e = o[0] - val_set[i].location;
                metric += e * e;
            }
        }
        return metric / static_cast<double>(val_set.size());
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        double metric_sum = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const double scale = 1.0 / static_cast<double>(b1 - b0);
            for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t i = order[k];
                const double target = target_of(train_set[i]);
                const double l = run_pass(net.layers(), task, start, train_in[i], target, grads, offsets, scale, pass, &out);
                loss_sum += l;
                if (task == Task::Classify) {
                    const int pred = static_cast<int>(std::max_element(out.begin(), out.end()) - out.begin());
                    metric_sum += pred == train_set[i].class_label ? 1.0 : 0.0;
                } else {
                    metric_sum += l;
                }
            }
            if (first < L) adam_step(net, adam, grads, cfg);
        }
        const double mean_loss = loss_sum / static_cast<double>(order.size());
        if (!std::isfinite(mean_loss)) {
            std::ostringstream msg;
            msg << "training diverged in epoch " << epoch + 1 << " (loss is not finite)";
            throw TrainingError(msg.str(), epoch + 1);
        }
        result.history.train_loss.push_back(mean_loss);
        result.history.train.push_back(metric_sum / static_cast<double>(order.size()));
        if (cfg.track_validation && !val_set.empty()) result.history.validation.push_back(score_val());
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!val_set.empty())
        result.metrics = task == Task::Classify ? evaluate_classifier(net, val_set) : evaluate_regressor(net, val_set);
    result.metrics.train_seconds = result.seconds;
    return result;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kArchiveMagic[4] = {'T', 'L', 'X', 'D'};
}

const ArchiveEntry* WeightArchive::find(std::string_view name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

WeightArchive snapshot(const Network& net) {
    WeightArchive a;
    for (const Param* p : net.params()) a.entries.push_back({p->name, p->dims, p->value, p->frozen});
    return a;
}

std::vector<std::uint8_t> encode(const WeightArchive& archive) {
    detail::ByteWriter w;
    w.put_bytes(std::string_view(kArchiveMagic, 4));
    w.put(archive.version);
    w.put(static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& e : archive.entries) {
        w.put(static_cast<std::uint32_t>(e.name.size()));
        w.put_bytes(e.name);
        w.put(static_cast<std::uint32_t>(e.dims.size()));
        for (std::size_t d : e.dims) w.put(static_cast<std::uint64_t>(d));
        w.put(static_cast<std::uint8_t>(e.frozen ? 1 : 0));
        w.put_doubles(e.values);
    }
    const auto& bytes = w.bytes();
    const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
    w.put(crc);
    return std::move(w.bytes());
}

WeightArchive decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 2 + 4 + 4) throw ArchiveError("archive too short");
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), 4);
    if (std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) throw ArchiveError("bad archive magic");
    const auto crc = static_cast<std::uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size())));
    if (crc != stored) throw ArchiveError("archive checksum mismatch (corrupted or truncated)");

    detail::ByteReader<ArchiveError> rd(body);
    rd.get_string(4);
    WeightArchive a;
    a.version = rd.get<std::uint16_t>();
    if (a.version != kArchiveVersion)
        throw ArchiveError("unsupported archive version " + std::to_string(a.version));
    const auto count = rd.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < count; ++k) {
        ArchiveEntry e;
        e.name = rd.get_string(rd.get<std::uint32_t>());
        const auto rank = rd.get<std::uint32_t>();
        if (rank > 8) throw ArchiveError("implausible tensor rank in archive");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            e.dims.push_back(static_cast<std::size_t>(rd.get<std::uint64_t>()));
            n *= e.dims.back();
        }
        e.frozen = rd.get<std::uint8_t>() != 0;
        if (n > rd.remaining() / sizeof(double)) throw ArchiveError("archive payload truncated");
        e.values.resize(n);
        rd.get_doubles(e.values);
        a.entries.push_back(std::move(e));
    }
    if (rd.remaining() != 0) throw ArchiveError("trailing bytes in archive");
    return a;
}

std::vector<LayerCompatibility> check_compatibility(const Network& net, const WeightArchive& archive) {
    std::vector<LayerCompatibility> out;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        const Layer& l = net.layer(i);
        if (l.params().empty()) continue;
        LayerCompatibility c{l.name(), true, {}};
        for (const Param& p : l.params()) {
            const ArchiveEntry* e = archive.find(p.name);
            if (!e) {
                c.accepted = false;
                c.reason = p.name + " missing from archive";
                break;
            }
            if (e->dims != p.dims || e->values.size() != p.value.size()) {
                c.accepted = false;
                std::ostringstream msg;
                msg << p.name << " shape mismatch: archive [";
                for (std::size_t d = 0; d < e->dims.size(); ++d) msg << (d ? "," : "") << e->dims[d];
                msg << "] vs network [";
                for (std::size_t d = 0; d < p.dims.size(); ++d) msg << (d ? "," : "") << p.dims[d];
                msg << "]";
                c.reason = msg.str();
                break;
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

void load_into(Network& net, const WeightArchive& archive, std::span<const std::string> layers) {
    const auto compat = check_compatibility(net, archive);
    auto wanted = [&](const std::string& name) {
        return layers.empty() || std::find(layers.begin(), layers.end(), name) != layers.end();
    };
    for (const std::string& name : layers)
        if (!net.layer_index(name)) throw ArchiveError("network has no layer named '" + name + "'");
    for (const auto& c : compat)
        if (wanted(c.layer) && !c.accepted) throw ArchiveError("layer '" + c.layer + "': " + c.reason);
    for (Param* p : net.params()) {
        const std::string layer_name = p->name.substr(0, p->name.find('.'));
        if (!wanted(layer_name)) continue;
        const ArchiveEntry* e = archive.find(p->name);
        p->value = e->values;
        p->frozen = e->frozen;
    }
}

void save_weights(const Network& net, const std::filesystem::path& path) {
    detail::write_file_bytes(path.string(), encode(snapshot(net)));
}

WeightArchive read_archive(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = detail::read_file_bytes(path.string());
    } catch (const std::exception& e) {
        throw ArchiveError(e.what());
    }
    return decode(bytes);
}

Network load_weights(const std::filesystem::path& path, const NetSpec& spec) {
    const WeightArchive archive = read_archive(path);
    Network net(spec, 0);
    load_into(net, archive);
    return net;
}

} // namespace tlfault::neuralnet
