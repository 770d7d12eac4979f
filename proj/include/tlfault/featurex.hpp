#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tlfault/fault_type.hpp"
#include "tlfault/powersim.hpp"

namespace tlfault::featurex {

inline constexpr std::size_t kWindowSize = 30;
inline constexpr std::size_t kNumFeatures = 7;
inline constexpr std::size_t kFrameRows = 7;
inline constexpr std::size_t kFrameSize = kFrameRows * kNumFeatures;
inline constexpr std::size_t kMinPostSamples = kWindowSize + kFrameRows - 1;

// ---------------------------------------------------------------------------
// Class encoding

/// Four output bits (A, B, C, G).
struct ClassCode {
    bool a = false, b = false, c = false, g = false;

    friend bool operator==(const ClassCode&, const ClassCode&) = default;
    std::string str() const;  // "1001"
    static ClassCode parse(std::string_view bits);
};

/// Label order: 0000, 1001, 0101, 0011, 1100, 1010, 0110, 1101, 1011, 0111, 1110.
const std::array<ClassCode, kNumClasses>& class_table();

ClassCode class_code_of(FaultType t);
/// 1111 maps onto the 1110 label. Throws ValidationError for codes outside the table.
int label_of(ClassCode code);
ClassCode code_of_label(int label);

// ---------------------------------------------------------------------------
// Signal features

/// Amplitude of the 60 Hz component of a 30-sample window at 1200 Hz:
/// |(2/N) sum x[n] exp(-j 2 pi f0 n / fs)|.
double main_harmonic(std::span<const double> window);

/// (ia + ib + ic) / 3, element-wise.
std::vector<double> zero_sequence(std::span<const double> ia, std::span<const double> ib,
                                  std::span<const double> ic);

using FeatureVector = std::array<double, kNumFeatures>;

/// |Va| |Vb| |Vc| |Ia| |Ib| |Ic| |I0| over samples [start, start + 30).
FeatureVector window_features(const powersim::WaveformRecord& rec, std::size_t start);

struct Sample {
    std::array<double, kFrameSize> frame{};  // row-major: 7 windows x 7 features
    int class_label = 0;
    ClassCode class_code;
    double location = 0.0;  // distance / length; NaN for no-fault samples
    double length = 0.0;

    std::span<const double, kNumFeatures> row(std::size_t r) const {
        return std::span<const double, kNumFeatures>(frame.data() + r * kNumFeatures, kNumFeatures);
    }
    bool faulted() const { return class_label != 0; }
};

/// Unnormalized frame from the 7 windows starting at the inception index, stride 1.
Sample assemble_frame(const powersim::WaveformRecord& rec);

// ---------------------------------------------------------------------------
// Normalization and splitting

struct Scaler {
    FeatureVector min{};
    FeatureVector max{};

    /// Min-max to [0, 1] with clamping; a zero-range feature maps to 0.
    double apply(std::size_t feature, double x) const;
    FeatureVector apply(const FeatureVector& x) const;
    void apply_in_place(Sample& s) const;
};

/// Per-feature min and max over every frame row of the training samples.
Scaler fit_scaler(std::span<const Sample> train);
std::vector<Sample> apply_scaler(const Scaler& scaler, std::vector<Sample> samples);

/// Stratified by class label; each class keeps round(ratio * n) samples for training,
/// clamped so that both sides get at least one.
std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(const std::vector<Sample>& samples,
                                                                  double ratio, std::uint64_t seed);

/// Normalized train/test split of one line length, plus the scaler fitted on the train side.
struct FeatureDataset {
    double length = 0.0;
    std::vector<Sample> train;
    std::vector<Sample> test;
    Scaler scaler;
};

FeatureDataset build_dataset(const std::vector<powersim::WaveformRecord>& records, double ratio,
                             std::uint64_t seed);

/// Keeps only faulted samples (location task).
FeatureDataset faulted_only(const FeatureDataset& ds);

/// CSV with 49 frame columns, class_label, class_code, location and split, preceded by a
/// comment line listing the class order. The scaler goes to `<path>.scaler.json`.
void write_dataset(const std::filesystem::path& path, const FeatureDataset& ds);
FeatureDataset read_dataset(const std::filesystem::path& path);

std::filesystem::path scaler_path(const std::filesystem::path& dataset);

} // namespace tlfault::featurex
