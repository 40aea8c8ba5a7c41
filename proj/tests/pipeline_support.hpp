#pragma once

#include "cropmap/pipeline.hpp"
#include "cropmap/synthetic.hpp"
#include "support.hpp"

#include <json.hpp>

#include <fstream>

namespace testsupport {

/// Synthetic tile plus config on disk. `extra` is merged over the base config.
inline std::filesystem::path write_workspace(const std::filesystem::path& dir, const cropmap::SyntheticTile& t,
                                             const nlohmann::json& extra = nlohmann::json::object()) {
    using namespace cropmap;
    std::filesystem::create_directories(dir / "raw");
    std::filesystem::create_directories(dir / "labels");
    write_bandstack(t.raw, dir / "raw" / "synth.bstk");
    write_label_polygons(t.polygons, dir / "labels" / "train.geojson");
    write_label_polygons(t.test_polygons, dir / "labels" / "test.geojson");
    nlohmann::json cfg = {
        {"seed", 7},
        {"paths",
         {{"out", "out"},
          {"tiles", {{{"name", "synth"}, {"raw", "raw/synth.bstk"}, {"labels", "labels/train.geojson"}}}},
          {"test_sets", {{{"name", "synth_test"}, {"tile", "synth"}, {"labels", "labels/test.geojson"}}}}}},
        {"cv", {{"k", 3}, {"block_size_m", 320}}},
        {"model",
         {{"kind", "rf"},
          {"grid", {{"n_estimators", {20}}, {"criterion", {"entropy"}}, {"max_depth", {15}}, {"max_samples", {0.5}}}}}},
        {"evaluation", {{"n_repeats", 2}}},
        {"variogram", {{"stride", 10}, {"max_lag_m", 600}, {"bin_width_m", 50}}},
    };
    cfg.merge_patch(extra);
    std::ofstream(dir / "config.json") << cfg.dump(2);
    return dir / "config.json";
}

inline void run_stages(const cropmap::PipelineConfig& cfg, std::initializer_list<const char*> stages) {
    using namespace cropmap;
    for (std::string s : stages) {
        if (s == "preprocess") cmd_preprocess(cfg);
        else if (s == "rasterize-labels") cmd_rasterize_labels(cfg);
        else if (s == "featurize") cmd_featurize(cfg);
        else if (s == "folds") cmd_folds(cfg);
        else if (s == "train") cmd_train(cfg);
        else if (s == "evaluate") cmd_evaluate(cfg);
        else if (s == "importance") cmd_importance(cfg);
        else if (s == "predict") cmd_predict(cfg);
        else if (s == "variogram") cmd_variogram(cfg);
        else if (s == "profile") cmd_profile(cfg);
    }
}

} // namespace testsupport
