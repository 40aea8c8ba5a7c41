#pragma once

#include "cropmap/classifiers.hpp"
#include "cropmap/diagnostics.hpp"
#include "cropmap/features.hpp"
#include "cropmap/preprocess.hpp"
#include "cropmap/spatial_cv.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cropmap {

inline constexpr const char* kSoftwareVersion = "0.1.0";

struct TileConfig {
    std::string name;
    std::filesystem::path raw;      // dated BSTK with spectral bands + SCL
    std::filesystem::path labels;   // training polygons, may be empty
};

struct TestSetConfig {
    std::string name;
    std::string tile;
    std::filesystem::path labels;
};

/// One JSON document. Relative paths resolve against the config file's directory.
///
/// {
///   "seed": 42, "threads": 0,
///   "paths": {"out": "out",
///             "tiles": [{"name": "a", "raw": "raw/a.bstk", "labels": "labels/a.geojson"}],
///             "test_sets": [{"name": "district", "tile": "a", "labels": "test/a.geojson"}]},
///   "preprocess": {"year": 2020, "scl_mask": [0,1,3,7,8,9,10], "imputation": "linear",
///                  "normalization": "as_reflectance"},
///   "features": {"groups": ["temporal", "statistical", "differential", "spatial"],
///                "spatial_scope": "all", "temporal_mode": "window_max", "write_csv": false},
///   "cv": {"k": 3, "block_size_m": 2000, "cv_seed": null, "dead_zone_m": 0, "max_reseed": 100},
///   "model": {"kind": "rf", "seed": null, "max_features": null,
///             "grid": {"n_estimators": [100], "criterion": ["entropy"], "max_depth": [15], "max_samples": [0.5]}},
///   "evaluation": {"n_repeats": 10, "importance_threshold": 0.001},
///   "predict": {"strip_rows": 0, "memory_mb": 256},
///   "variogram": {"bin_width_m": 250, "max_lag_m": 10000, "stride": 2000, "random_n": 0},
///   "profile": {"window": 9, "order": 3, "edge": "interp"}
/// }
///
/// "model.grid" may also be the string "search_space" for the full rf / svm grid.
struct PipelineConfig {
    std::uint64_t seed = 42;
    unsigned threads = 0;
    std::filesystem::path out = "out";
    std::vector<TileConfig> tiles;
    std::vector<TestSetConfig> test_sets;

    std::optional<int> year;
    CloudMaskPolicy scl_policy = CloudMaskPolicy::sentinel2_default();
    ImputationMethod imputation = ImputationMethod::linear;
    NormalizationMethod normalization = NormalizationMethod::as_reflectance;

    FeatureSpec features;
    bool write_feature_csv = false;

    int cv_k = 3;
    double block_size_m = 2000.0;
    std::optional<std::uint64_t> cv_seed;
    double dead_zone_m = 0.0;
    int max_reseed = 100;

    HyperParamGrid grid;
    std::optional<std::uint64_t> model_seed;

    int n_repeats = 10;
    double importance_threshold = 0.001;

    int strip_rows = 0;             // 0: derived from memory_mb
    double memory_mb = 256.0;

    double bin_width_m = 250.0;
    double max_lag_m = 10000.0;
    std::size_t stride = 2000;
    std::size_t random_n = 0;       // > 0: random subsample instead of stride

    int sg_window = 9;
    int sg_order = 3;
    SavgolEdge sg_edge = SavgolEdge::interp;

    std::string config_hash;        // FNV-1a of the canonical JSON, hex

    PipelineConfig();
    std::uint64_t cv_seed_value() const { return cv_seed.value_or(seed); }
    std::uint64_t model_seed_value() const { return model_seed.value_or(seed); }
    std::size_t tile_index(const std::string& name) const;

    /// Throws ConfigError on unknown keys, bad enums or missing files.
    static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

PipelineConfig load_config(const std::filesystem::path& path, const nlohmann::json& overrides = nlohmann::json::object());

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t file_digest(const std::filesystem::path& path);
std::string digest_hex(std::uint64_t d);

/// Artifact locations under the output directory.
struct Layout {
    std::filesystem::path out;

    std::filesystem::path composite(const std::string& tile) const { return out / "composites" / (tile + ".bstk"); }
    std::filesystem::path removed_mask(const std::string& tile) const {
        return out / "composites" / (tile + "_removed.pgm");
    }
    std::filesystem::path labels(const std::string& tile) const { return out / "labels" / (tile + "_labels.bstk"); }
    std::filesystem::path train_features() const { return out / "features" / "train"; }
    std::filesystem::path scaler() const { return out / "features" / "scaler.json"; }
    std::filesystem::path folds_csv() const { return out / "folds" / "folds.csv"; }
    std::filesystem::path folds_json() const { return out / "folds" / "folds.json"; }
    std::filesystem::path fold_raster(const std::string& tile) const {
        return out / "folds" / (tile + "_folds.bstk");
    }
    std::filesystem::path grid_csv() const { return out / "model" / "grid.csv"; }
    std::filesystem::path model() const { return out / "model" / "model.json"; }
    std::filesystem::path best_params() const { return out / "model" / "best_params.txt"; }
    std::filesystem::path report_json() const { return out / "reports" / "report.json"; }
    std::filesystem::path report_csv() const { return out / "reports" / "report.csv"; }
    std::filesystem::path importance_csv() const { return out / "reports" / "importance.csv"; }
    std::filesystem::path importance_json() const { return out / "reports" / "importance.json"; }
    std::filesystem::path mask_pgm(const std::string& tile) const { return out / "maps" / (tile + "_mask.pgm"); }
    std::filesystem::path mask_bstk(const std::string& tile) const { return out / "maps" / (tile + "_mask.bstk"); }
    std::filesystem::path votes(const std::string& tile) const { return out / "maps" / (tile + "_votes.f32"); }
    std::filesystem::path variogram_csv() const { return out / "diagnostics" / "variogram.csv"; }
    std::filesystem::path profile_csv(const std::string& tile) const {
        return out / "diagnostics" / (tile + "_ndvi_profile.csv");
    }
    std::filesystem::path manifest() const { return out / "run_manifest.json"; }
};

struct StageRecord {
    std::map<std::string, std::string> inputs;    // path -> digest hex
    std::map<std::string, std::string> outputs;
    double wall_seconds = 0.0;
    nlohmann::ordered_json info = nlohmann::ordered_json::object();
};

class RunManifest {
public:
    static RunManifest load(const std::filesystem::path& path);   // empty if absent
    void save(const std::filesystem::path& path) const;

    void set_stage(const std::string& stage, StageRecord rec) { stages_[stage] = std::move(rec); }
    const StageRecord* stage(const std::string& name) const;
    nlohmann::ordered_json& header() { return header_; }

    /// StaleInputError unless `deps` and their own dependencies have run and every
    /// file they read or wrote still has the recorded digest.
    void verify(std::span<const std::string> deps) const;

private:
    nlohmann::ordered_json header_ = nlohmann::ordered_json::object();
    std::map<std::string, StageRecord> stages_;
};

/// Upstream stages per stage name.
std::vector<std::string> stage_dependencies(const std::string& stage);

// Stages. Each verifies its upstream, writes its artifacts and updates the manifest.
void cmd_preprocess(const PipelineConfig& cfg);
void cmd_rasterize_labels(const PipelineConfig& cfg);
void cmd_featurize(const PipelineConfig& cfg);
void cmd_folds(const PipelineConfig& cfg);
GridSearchResult cmd_train(const PipelineConfig& cfg);
EvaluationReport cmd_evaluate(const PipelineConfig& cfg);
ImportanceTable cmd_importance(const PipelineConfig& cfg);
void cmd_predict(const PipelineConfig& cfg);
SphericalFit cmd_variogram(const PipelineConfig& cfg);
void cmd_profile(const PipelineConfig& cfg);

/// Composite ready for featurize: pointwise normalization (if configured) + NDVI.
CompositeStack prepare_composite(const CompositeStack& c, NormalizationMethod method);
LabelRaster label_raster_from_bandstack(const BandStack& s);

/// Float32 little-endian H x W raster, NaN for nodata.
void write_f32_raster(std::span<const float> values, const std::filesystem::path& path);
std::vector<float> read_f32_raster(const std::filesystem::path& path);

} // namespace cropmap
