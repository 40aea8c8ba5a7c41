#pragma once

#include "cropmap/evaluation.hpp"
#include "cropmap/preprocess.hpp"
#include "cropmap/raster_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cropmap {

/// Band order used by every feature group.
inline constexpr std::array<Band, 5> kFeatureBands{Band::B02, Band::B03, Band::B04, Band::B08, Band::NDVI};
inline constexpr int kTemporalWindow = 4;
inline constexpr int kTemporalWindows = (kWeeksPerYear + kTemporalWindow - 1) / kTemporalWindow;   // 14

enum class SpatialScope { all, ndvi, none };
/// window_max: per 4-week window maximum. point_sample: first week of each window.
enum class TemporalMode { window_max, point_sample };

struct FeatureSpec {
    bool temporal = true;
    bool statistical = true;
    bool differential = true;
    bool spatial = true;
    SpatialScope spatial_scope = SpatialScope::all;
    TemporalMode temporal_mode = TemporalMode::window_max;

    static FeatureSpec full() { return {}; }
    static FeatureSpec no_spatial();
    static FeatureSpec ndvi_spatial();

    /// Throws ConfigError for an empty group set or a spatial/scope mismatch.
    void validate() const;
    std::size_t dimension() const;
    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

SpatialScope parse_spatial_scope(std::string_view s);
std::string_view spatial_scope_name(SpatialScope s);

/// Canonical column names, in column order.
std::vector<std::string> feature_names(const FeatureSpec& spec);

/// (nir - red) / (nir + red); 0 when the sum is 0.
double ndvi(double nir, double red);

/// Copy of the composite with an NDVI band appended (computed from B08 and B04).
CompositeStack append_ndvi(const CompositeStack& stack);

// Per-pixel feature groups. `series` is band-major: 5 bands x 53 weeks in
// kFeatureBands order.
std::vector<double> temporal_features(std::span<const double> series, TemporalMode mode = TemporalMode::window_max);
std::vector<double> statistical_features(std::span<const double> series);
std::vector<double> differential_features(std::span<const double> ndvi_series);
/// Mean and population std of the existing, non-removed 8-neighbours per week
/// and band. A pixel without any neighbour uses its own value (std 0).
std::vector<double> spatial_features(const CompositeStack& stack, int row, int col,
                                     SpatialScope scope = SpatialScope::all);

struct PixelIndex {
    std::int32_t tile = 0;
    std::int32_t row = 0;
    std::int32_t col = 0;
    friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
};

struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;            // row-major rows x cols
    std::vector<std::string> names;
    std::vector<PixelIndex> pixels;
    std::vector<std::uint8_t> labels;      // empty when unlabeled

    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    std::span<double> row(std::size_t i) { return {values.data() + i * cols, cols}; }
    double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
    bool has_labels() const { return !labels.empty(); }

    /// Rows in `index` order, keeping pixels and labels aligned.
    FeatureMatrix select_rows(std::span<const std::size_t> index) const;
    /// Appends rows of a matrix with identical names.
    void append(const FeatureMatrix& other);

    friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

inline DataView view(const FeatureMatrix& m) { return {m.values, m.rows, m.cols}; }

/// Features of every non-removed pixel, row-major. The stack must be imputed,
/// normalized and carry NDVI (see append_ndvi).
FeatureMatrix featurize(const CompositeStack& stack, const FeatureSpec& spec, std::int32_t tile = 0);

/// Same as featurize restricted to rows [row_begin, row_end); neighbours outside
/// that range still come from `stack`. Pixel rows are reported relative to the
/// stack, plus `row_offset`.
FeatureMatrix featurize_rows(const CompositeStack& stack, const FeatureSpec& spec, int row_begin, int row_end,
                             std::int32_t tile = 0, int row_offset = 0);

/// Keeps rows whose pixel is labeled in `labels` and records their class.
FeatureMatrix select_labeled(const FeatureMatrix& fm, const LabelRaster& labels);

/// Per-column scaling fitted on one matrix and reusable on others.
struct ColumnScaler {
    NormalizationMethod method = NormalizationMethod::normalize;
    std::vector<double> offset;
    std::vector<double> factor;   // 0 for constant columns

    /// standardize: (x - min) / (max - min); normalize: (x - mean) / std (population).
    static ColumnScaler fit(const FeatureMatrix& fm, NormalizationMethod method);
    void apply(FeatureMatrix& fm) const;
};

/// Per-column normalization of a matrix against its own statistics.
FeatureMatrix normalize(const FeatureMatrix& fm, NormalizationMethod method);

void write_feature_csv(const FeatureMatrix& fm, const std::filesystem::path& path);
/// "<base>.f64" (rows x cols little-endian doubles) and "<base>.json" sidecar.
void write_feature_matrix(const FeatureMatrix& fm, const std::filesystem::path& base);
FeatureMatrix read_feature_matrix(const std::filesystem::path& base);

} // namespace cropmap
