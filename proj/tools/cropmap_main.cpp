#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"
#include "cropmap/pipeline.hpp"
#include "cropmap/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace cropmap;

namespace {

int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::convergence: return 4;
    }
    return 1;
}

/// Demo inputs: one synthetic tile, its training and test polygons, and a config.
void write_synthetic_demo(const fs::path& dir, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    const SyntheticTile t = make_synthetic_tile(spec);
    fs::create_directories(dir / "raw");
    fs::create_directories(dir / "labels");
    write_bandstack(t.raw, dir / "raw" / "synth.bstk");
    write_label_polygons(t.polygons, dir / "labels" / "synth_train.geojson");
    write_label_polygons(t.test_polygons, dir / "labels" / "synth_test.geojson");

    nlohmann::ordered_json cfg;
    cfg["seed"] = seed;
    cfg["paths"] = {{"out", "out"},
                    {"tiles", {{{"name", "synth"}, {"raw", "raw/synth.bstk"}, {"labels", "labels/synth_train.geojson"}}}},
                    {"test_sets", {{{"name", "synth_test"}, {"tile", "synth"}, {"labels", "labels/synth_test.geojson"}}}}};
    cfg["cv"] = {{"k", 3}, {"block_size_m", 320}};
    cfg["variogram"] = {{"stride", 10}, {"max_lag_m", 1000}, {"bin_width_m", 50}};
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2) << '\n';
    if (!out)
        throw IoError("cannot write " + (dir / "config.json").string());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cropmap: cropland mapping from satellite image time series"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::string out_dir;
    app.add_option("--config", config_path, "pipeline configuration (JSON)");
    app.add_option("--seed", seed, "master seed (overrides config 'seed')");
    app.add_option("--threads", threads, "worker threads, 0 = all cores (overrides config 'threads')");
    app.add_option("--out", out_dir, "output directory (overrides config paths.out)");

    struct Cmd {
        const char* name;
        const char* help;
    };
    const Cmd cmds[] = {
        {"preprocess", "cloud mask, weekly composite, impute"},
        {"rasterize-labels", "burn label polygons into per-tile rasters"},
        {"featurize", "feature matrix of the labeled pixels"},
        {"folds", "spatial block folds for the training polygons"},
        {"train", "grid search over spatial CV, fit the best model"},
        {"evaluate", "per-region and weighted metrics on the test sets"},
        {"importance", "permutation feature importance"},
        {"predict", "cropland mask per tile, streamed in row strips"},
        {"variogram", "empirical semivariogram of the labels + spherical fit"},
        {"profile", "per-class weekly NDVI profiles"},
        {"run", "preprocess through predict in one go"},
    };
    for (const auto& c : cmds)
        app.add_subcommand(c.name, c.help)->fallthrough();

    auto* synth = app.add_subcommand("synth", "write a synthetic demo tile, labels and config");
    synth->fallthrough();
    std::string synth_dir = "demo";
    synth->add_option("--dir", synth_dir, "target directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (threads)
            set_default_threads(*threads);
        if (synth->parsed()) {
            write_synthetic_demo(synth_dir, seed.value_or(42));
            std::printf("wrote %s/config.json\n", synth_dir.c_str());
            return 0;
        }
        if (config_path.empty())
            throw ConfigError("--config is required");

        nlohmann::json overrides = nlohmann::json::object();
        if (seed)
            overrides["seed"] = *seed;
        if (threads)
            overrides["threads"] = *threads;
        if (!out_dir.empty())
            overrides["paths"]["out"] = fs::absolute(out_dir).string();
        const PipelineConfig cfg = load_config(config_path, overrides);

        auto run = [&](const std::string& name) {
            if (name == "preprocess")
                cmd_preprocess(cfg);
            else if (name == "rasterize-labels")
                cmd_rasterize_labels(cfg);
            else if (name == "featurize")
                cmd_featurize(cfg);
            else if (name == "folds")
                cmd_folds(cfg);
            else if (name == "train") {
                const auto gs = cmd_train(cfg);
                const auto& b = gs.best_row();
                std::printf("best: %s  (cv accuracy %.4f, f1 %.4f)\n", b.params.describe().c_str(), b.mean.accuracy,
                            b.mean.f1);
            } else if (name == "evaluate") {
                const auto rep = cmd_evaluate(cfg);
                for (const auto& r : rep.regions)
                    std::printf("%-20s acc %.4f  prec %.4f  rec %.4f  f1 %.4f  (%llu px)\n", r.name.c_str(),
                                r.scores.accuracy, r.scores.precision, r.scores.recall, r.scores.f1,
                                static_cast<unsigned long long>(r.pixels));
                std::printf("%-20s acc %.4f  prec %.4f  rec %.4f  f1 %.4f\n", "weighted", rep.weighted.accuracy,
                            rep.weighted.precision, rep.weighted.recall, rep.weighted.f1);
            } else if (name == "importance") {
                const auto t = cmd_importance(cfg);
                const auto head = t.headline(cfg.importance_threshold);
                for (const auto& f : head)
                    std::printf("%-28s %.5f +- %.5f\n", f.name.c_str(), f.mean, f.std);
                if (head.empty())
                    std::printf("no feature above importance threshold %g (baseline accuracy %.4f)\n",
                                cfg.importance_threshold, t.baseline_accuracy);
            } else if (name == "predict")
                cmd_predict(cfg);
            else if (name == "variogram") {
                const auto f = cmd_variogram(cfg);
                std::printf("spherical fit: nugget %.4g  sill %.4g  range %.4g m%s\n", f.nugget, f.sill, f.range,
                            f.degenerate ? "  (degenerate)" : "");
            } else if (name == "profile")
                cmd_profile(cfg);
        };

        for (auto* sub : app.get_subcommands()) {
            const std::string name = sub->get_name();
            if (name == "run") {
                for (const char* s : {"preprocess", "rasterize-labels", "featurize", "folds", "train"})
                    run(s);
                if (!cfg.test_sets.empty())
                    run("evaluate");
                run("predict");
            } else {
                run(name);
            }
        }
        return 0;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
