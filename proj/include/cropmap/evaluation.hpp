#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cropmap {

/// Binary confusion counts; the positive class is cropland (1).
struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> predicted);

struct Metrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Accuracy, precision, recall and F1 of the positive class. Any 0/0 is 0.
Metrics metrics(const ConfusionCounts& c);

/// Per-metric mean of `parts` weighted by `weights` (pixel counts).
Metrics weighted_average(std::span<const Metrics> parts, std::span<const double> weights);
Metrics mean_metrics(std::span<const Metrics> parts);

struct RegionResult {
    std::string name;
    ConfusionCounts counts;
    Metrics scores;
    std::uint64_t pixels = 0;
};

struct EvaluationReport {
    std::string model_id;
    std::vector<RegionResult> regions;
    Metrics weighted;
};

/// Builds the report; weights are the regions' evaluated pixel counts.
EvaluationReport make_report(std::string model_id, std::vector<RegionResult> regions);
void write_report_json(const EvaluationReport& r, const std::filesystem::path& path);
void write_report_csv(const EvaluationReport& r, const std::filesystem::path& path);

/// Row-major dense matrix borrowed from the caller.
struct DataView {
    std::span<const double> values;
    std::size_t rows = 0;
    std::size_t cols = 0;

    double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
    std::span<const double> row(std::size_t i) const { return values.subspan(i * cols, cols); }
};

using Predictor = std::function<std::vector<std::uint8_t>(const DataView&)>;

struct FeatureImportance {
    std::string name;
    std::size_t column = 0;
    double mean = 0.0;
    double std = 0.0;
    int n_repeats = 0;
};

/// Sorted by mean importance, descending; ties keep column order.
struct ImportanceTable {
    double baseline_accuracy = 0.0;
    std::vector<FeatureImportance> features;

    /// Entries with mean importance > threshold.
    std::vector<FeatureImportance> headline(double threshold = 0.001) const;
};

/// Accuracy drop when a single column is shuffled; the permutation of (column j,
/// repeat r) is seeded by derive_seed(derive_seed(seed, j), r).
ImportanceTable permutation_importance(const Predictor& predict, const DataView& X, std::span<const std::uint8_t> y,
                                       std::span<const std::string> names, int n_repeats, std::uint64_t seed,
                                       unsigned threads = 0);

/// feature_name,mean,std,rank
void write_importance_csv(const ImportanceTable& t, const std::filesystem::path& path);
void write_importance_json(const ImportanceTable& t, double threshold, const std::filesystem::path& path);

} // namespace cropmap
