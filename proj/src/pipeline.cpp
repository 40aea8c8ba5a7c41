#include "cropmap/pipeline.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

namespace cropmap {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ------------------------------------------------------------------ config

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object())
        throw ConfigError(where + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed)
            ok = ok || it.key() == a;
        if (!ok)
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q.lexically_normal() : (base / q).lexically_normal();
}

std::vector<double> number_list(const json& j, const char* key) {
    std::vector<double> out;
    const auto& v = j.at(key);
    if (v.is_number())
        out.push_back(v.get<double>());
    else
        for (const auto& x : v)
            out.push_back(x.get<double>());
    return out;
}

json as_list(const json& v) { return v.is_array() ? v : json::array({v}); }

HyperParamGrid parse_grid(const json& m) {
    check_keys(m, {"kind", "seed", "max_features", "grid", "params"}, "model");
    const ModelKind kind = parse_model_kind(m.value("kind", "rf"));
    HyperParamGrid g;
    if (kind == ModelKind::svm) {
        g = HyperParamGrid::svm_search_space();
        g.C = {0.5};
        g.kernel = {Kernel::poly};
    } else {
        g = HyperParamGrid::forest_search_space();
        g.n_estimators = {100};
        g.criterion = {Criterion::entropy};
        g.max_depth = {15};
        g.max_samples = {0.5};
    }
    if (m.contains("max_features") && !m["max_features"].is_null())
        g.forest_base.max_features = m["max_features"].get<std::size_t>();

    const json* spec = nullptr;
    if (m.contains("grid") && m.contains("params"))
        throw ConfigError("model: give either grid or params, not both");
    if (m.contains("grid"))
        spec = &m["grid"];
    else if (m.contains("params"))
        spec = &m["params"];
    if (!spec)
        return g;
    if (spec->is_string()) {
        if (spec->get<std::string>() != "search_space")
            throw ConfigError("model.grid must be an object or \"search_space\"");
        auto full = kind == ModelKind::rf ? HyperParamGrid::forest_search_space() : HyperParamGrid::svm_search_space();
        full.forest_base = g.forest_base;
        return full;
    }
    if (kind == ModelKind::rf) {
        check_keys(*spec, {"n_estimators", "criterion", "max_depth", "max_samples", "bootstrap"}, "model.grid");
        if (spec->contains("n_estimators")) {
            g.n_estimators.clear();
            for (const auto& v : as_list((*spec)["n_estimators"]))
                g.n_estimators.push_back(v.get<int>());
        }
        if (spec->contains("criterion")) {
            g.criterion.clear();
            for (const auto& v : as_list((*spec)["criterion"]))
                g.criterion.push_back(parse_criterion(v.get<std::string>()));
        }
        if (spec->contains("max_depth")) {
            g.max_depth.clear();
            for (const auto& v : as_list((*spec)["max_depth"]))
                g.max_depth.push_back(v.is_null() ? 0 : v.get<int>());
        }
        if (spec->contains("max_samples"))
            g.max_samples = number_list(*spec, "max_samples");
        if (spec->contains("bootstrap"))
            g.forest_base.bootstrap = (*spec)["bootstrap"].get<bool>();
    } else {
        check_keys(*spec, {"C", "kernel", "gamma", "tolerance", "max_iter"}, "model.grid");
        if (spec->contains("C"))
            g.C = number_list(*spec, "C");
        if (spec->contains("kernel")) {
            g.kernel.clear();
            for (const auto& v : as_list((*spec)["kernel"]))
                g.kernel.push_back(parse_kernel(v.get<std::string>()));
        }
        if (spec->contains("gamma")) {
            g.gamma.clear();
            for (const auto& v : as_list((*spec)["gamma"])) {
                if (v.is_string()) {
                    if (v.get<std::string>() != "scale")
                        throw ConfigError("gamma must be a number or \"scale\"");
                    g.gamma.push_back(0.0);
                } else {
                    g.gamma.push_back(v.get<double>());
                }
            }
        }
        if (spec->contains("tolerance"))
            g.svm_base.tolerance = (*spec)["tolerance"].get<double>();
        if (spec->contains("max_iter"))
            g.svm_base.max_iter = (*spec)["max_iter"].get<std::size_t>();
    }
    g.enumerate();   // validates non-empty lists
    return g;
}

} // namespace

PipelineConfig::PipelineConfig() {
    grid = HyperParamGrid::forest_search_space();
    grid.n_estimators = {100};
    grid.criterion = {Criterion::entropy};
    grid.max_depth = {15};
    grid.max_samples = {0.5};
}

std::size_t PipelineConfig::tile_index(const std::string& name) const {
    for (std::size_t i = 0; i < tiles.size(); ++i)
        if (tiles[i].name == name)
            return i;
    throw ConfigError("unknown tile '" + name + "'");
}

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base) {
    PipelineConfig c;
    try {
        check_keys(j, {"seed", "threads", "paths", "preprocess", "features", "cv", "model", "evaluation", "predict",
                       "variogram", "profile"},
                   "config");
        c.seed = j.value("seed", c.seed);
        c.threads = j.value("threads", 0u);

        const json paths = j.value("paths", json::object());
        check_keys(paths, {"out", "tiles", "test_sets"}, "paths");
        c.out = resolve(base, paths.value("out", std::string("out")));
        std::set<std::string> names;
        for (const auto& t : paths.value("tiles", json::array())) {
            check_keys(t, {"name", "raw", "labels"}, "paths.tiles[]");
            TileConfig tc;
            tc.raw = resolve(base, t.at("raw").get<std::string>());
            tc.name = t.contains("name") ? t["name"].get<std::string>() : tc.raw.stem().string();
            if (t.contains("labels") && !t["labels"].is_null())
                tc.labels = resolve(base, t["labels"].get<std::string>());
            if (!names.insert(tc.name).second)
                throw ConfigError("duplicate tile name '" + tc.name + "'");
            if (!fs::exists(tc.raw))
                throw ConfigError("tile file not found: " + tc.raw.string());
            if (!tc.labels.empty() && !fs::exists(tc.labels))
                throw ConfigError("label file not found: " + tc.labels.string());
            c.tiles.push_back(std::move(tc));
        }
        for (const auto& t : paths.value("test_sets", json::array())) {
            check_keys(t, {"name", "tile", "labels"}, "paths.test_sets[]");
            TestSetConfig ts;
            ts.tile = t.at("tile").get<std::string>();
            ts.name = t.value("name", ts.tile);
            ts.labels = resolve(base, t.at("labels").get<std::string>());
            c.tile_index(ts.tile);
            if (!fs::exists(ts.labels))
                throw ConfigError("test label file not found: " + ts.labels.string());
            c.test_sets.push_back(std::move(ts));
        }

        const json pre = j.value("preprocess", json::object());
        check_keys(pre, {"year", "scl_mask", "imputation", "normalization"}, "preprocess");
        if (pre.contains("year") && !pre["year"].is_null())
            c.year = pre["year"].get<int>();
        if (pre.contains("scl_mask"))
            c.scl_policy = CloudMaskPolicy::from_codes(pre["scl_mask"].get<std::vector<int>>());
        c.imputation = parse_imputation(pre.value("imputation", std::string("linear")));
        c.normalization = parse_normalization(pre.value("normalization", std::string("as_reflectance")));

        const json f = j.value("features", json::object());
        check_keys(f, {"groups", "spatial_scope", "temporal_mode", "write_csv"}, "features");
        if (f.contains("groups")) {
            c.features.temporal = c.features.statistical = c.features.differential = c.features.spatial = false;
            for (const auto& g : f["groups"]) {
                const std::string name = g.get<std::string>();
                if (name == "temporal")
                    c.features.temporal = true;
                else if (name == "statistical")
                    c.features.statistical = true;
                else if (name == "differential")
                    c.features.differential = true;
                else if (name == "spatial")
                    c.features.spatial = true;
                else
                    throw ConfigError("unknown feature group '" + name + "'");
            }
        }
        c.features.spatial_scope = parse_spatial_scope(
            f.value("spatial_scope", std::string(c.features.spatial ? "all" : "none")));
        const std::string tm = f.value("temporal_mode", std::string("window_max"));
        if (tm == "window_max")
            c.features.temporal_mode = TemporalMode::window_max;
        else if (tm == "point_sample")
            c.features.temporal_mode = TemporalMode::point_sample;
        else
            throw ConfigError("unknown temporal_mode '" + tm + "'");
        c.features.validate();
        c.write_feature_csv = f.value("write_csv", false);

        const json cv = j.value("cv", json::object());
        check_keys(cv, {"k", "block_size_m", "seed", "cv_seed", "dead_zone_m", "max_reseed"}, "cv");
        c.cv_k = cv.value("k", 3);
        c.block_size_m = cv.value("block_size_m", 2000.0);
        if (cv.contains("seed") && cv.contains("cv_seed"))
            throw ConfigError("cv: give seed or cv_seed, not both");
        for (const char* key : {"seed", "cv_seed"})
            if (cv.contains(key) && !cv[key].is_null())
                c.cv_seed = cv[key].get<std::uint64_t>();
        c.dead_zone_m = cv.value("dead_zone_m", 0.0);
        c.max_reseed = cv.value("max_reseed", 100);
        if (c.cv_k < 2 || !(c.block_size_m > 0) || c.dead_zone_m < 0 || c.max_reseed < 1)
            throw ConfigError("cv: need k >= 2, block_size_m > 0, dead_zone_m >= 0, max_reseed >= 1");

        const json m = j.value("model", json::object());
        c.grid = parse_grid(m);
        if (m.contains("seed") && !m["seed"].is_null())
            c.model_seed = m["seed"].get<std::uint64_t>();

        const json ev = j.value("evaluation", json::object());
        check_keys(ev, {"n_repeats", "importance_threshold"}, "evaluation");
        c.n_repeats = ev.value("n_repeats", 10);
        c.importance_threshold = ev.value("importance_threshold", 0.001);
        if (c.n_repeats < 1)
            throw ConfigError("evaluation.n_repeats must be >= 1");

        const json pr = j.value("predict", json::object());
        check_keys(pr, {"strip_rows", "memory_mb"}, "predict");
        c.strip_rows = pr.value("strip_rows", 0);
        c.memory_mb = pr.value("memory_mb", 256.0);
        if (c.strip_rows < 0 || !(c.memory_mb > 0))
            throw ConfigError("predict: strip_rows >= 0 and memory_mb > 0 required");

        const json vg = j.value("variogram", json::object());
        check_keys(vg, {"bin_width_m", "max_lag_m", "stride", "random_n"}, "variogram");
        c.bin_width_m = vg.value("bin_width_m", 250.0);
        c.max_lag_m = vg.value("max_lag_m", 10000.0);
        c.stride = vg.value("stride", std::size_t{2000});
        c.random_n = vg.value("random_n", std::size_t{0});
        if (!(c.bin_width_m > 0) || !(c.max_lag_m > 0) || c.stride == 0)
            throw ConfigError("variogram: bin_width_m, max_lag_m and stride must be positive");

        const json pf = j.value("profile", json::object());
        check_keys(pf, {"window", "order", "edge"}, "profile");
        c.sg_window = pf.value("window", 9);
        c.sg_order = pf.value("order", 3);
        const std::string edge = pf.value("edge", std::string("interp"));
        if (edge == "interp")
            c.sg_edge = SavgolEdge::interp;
        else if (edge == "mirror")
            c.sg_edge = SavgolEdge::mirror;
        else
            throw ConfigError("profile.edge must be interp or mirror");
        savgol_weights(c.sg_window, c.sg_order);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    const std::string canon = j.dump();
    c.config_hash = digest_hex(
        fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(canon.data()), canon.size())));
    return c;
}

PipelineConfig load_config(const fs::path& path, const json& overrides) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object())
        throw ConfigError("config must be a JSON object");
    j.merge_patch(overrides);
    return PipelineConfig::from_json(j, fs::absolute(path).parent_path());
}

// ------------------------------------------------------------------ digests & manifest

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h) {
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::vector<char> buf(1 << 20);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto got = static_cast<std::size_t>(in.gcount());
        h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(buf.data()), got), h);
    }
    return h;
}

std::string digest_hex(std::uint64_t d) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
    return buf;
}

RunManifest RunManifest::load(const fs::path& path) {
    RunManifest m;
    if (!fs::exists(path))
        return m;
    std::ifstream in(path);
    json j;
    try {
        j = json::parse(in);
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "stages")
                m.header_[it.key()] = it.value();
        const json stages = j.value("stages", json::object());
        for (auto it = stages.begin(); it != stages.end(); ++it) {
            StageRecord r;
            r.inputs = it.value().value("inputs", std::map<std::string, std::string>{});
            r.outputs = it.value().value("outputs", std::map<std::string, std::string>{});
            r.wall_seconds = it.value().value("wall_seconds", 0.0);
            r.info = it.value().value("info", ordered_json::object());
            m.stages_[it.key()] = std::move(r);
        }
    } catch (const json::exception& e) {
        throw FormatError("run manifest " + path.string() + " is corrupt: " + e.what());
    }
    return m;
}

void RunManifest::save(const fs::path& path) const {
    ordered_json j = header_;
    ordered_json st = ordered_json::object();
    for (const auto& [name, r] : stages_) {
        ordered_json e;
        e["inputs"] = r.inputs;
        e["outputs"] = r.outputs;
        e["wall_seconds"] = r.wall_seconds;
        e["info"] = r.info;
        st[name] = std::move(e);
    }
    j["stages"] = std::move(st);
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

const StageRecord* RunManifest::stage(const std::string& name) const {
    auto it = stages_.find(name);
    return it == stages_.end() ? nullptr : &it->second;
}

std::vector<std::string> stage_dependencies(const std::string& stage) {
    static const std::map<std::string, std::vector<std::string>> deps = {
        {"preprocess", {}},
        {"rasterize-labels", {}},
        {"featurize", {"preprocess", "rasterize-labels"}},
        {"folds", {}},
        {"train", {"featurize", "folds"}},
        {"evaluate", {"train", "preprocess"}},
        {"importance", {"train", "preprocess"}},
        {"predict", {"train", "preprocess"}},
        {"variogram", {"rasterize-labels"}},
        {"profile", {"preprocess", "rasterize-labels"}},
    };
    auto it = deps.find(stage);
    if (it == deps.end())
        throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

void RunManifest::verify(std::span<const std::string> deps) const {
    std::set<std::string> seen;
    std::map<std::string, std::string> cache;
    std::function<void(const std::string&)> visit = [&](const std::string& s) {
        if (!seen.insert(s).second)
            return;
        const StageRecord* r = stage(s);
        if (!r)
            throw StaleInputError("stage '" + s + "' has not been run; run it first");
        auto check = [&](const std::map<std::string, std::string>& files) {
            for (const auto& [path, digest] : files) {
                if (!fs::exists(path))
                    throw StaleInputError("'" + path + "' recorded by stage '" + s + "' is missing; re-run " + s);
                auto it = cache.find(path);
                if (it == cache.end())
                    it = cache.emplace(path, digest_hex(file_digest(path))).first;
                if (it->second != digest)
                    throw StaleInputError("'" + path + "' changed since stage '" + s + "' ran; re-run " + s);
            }
        };
        check(r->inputs);
        check(r->outputs);
        for (const auto& d : stage_dependencies(s))
            visit(d);
    };
    for (const auto& d : deps)
        visit(d);
}

// ------------------------------------------------------------------ helpers

namespace {

/// Bookkeeping for one stage run.
class Stage {
public:
    Stage(const PipelineConfig& cfg, std::string name)
        : cfg_(cfg), layout_{cfg.out}, name_(std::move(name)), t0_(std::chrono::steady_clock::now()) {
        if (cfg.threads)
            set_default_threads(cfg.threads);
        manifest_ = RunManifest::load(layout_.manifest());
        const auto deps = stage_dependencies(name_);
        manifest_.verify(deps);
    }

    const Layout& layout() const { return layout_; }
    RunManifest& manifest() { return manifest_; }

    void input(const fs::path& p) { rec_.inputs[p.string()] = digest_hex(file_digest(p)); }
    void output(const fs::path& p) { rec_.outputs[p.string()] = digest_hex(file_digest(p)); }
    ordered_json& info() { return rec_.info; }

    static fs::path prepare(const fs::path& p) {
        fs::create_directories(p.parent_path());
        return p;
    }

    void finish() {
        rec_.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        auto& h = manifest_.header();
        h["software_version"] = kSoftwareVersion;
        h["config_hash"] = cfg_.config_hash;
        h["seeds"]["seed"] = cfg_.seed;
        h["seeds"]["cv_seed"] = cfg_.cv_seed_value();
        h["seeds"]["model_seed"] = cfg_.model_seed_value();
        if (rec_.info.contains("cv_seed_used"))
            h["seeds"]["cv_seed_used"] = rec_.info["cv_seed_used"];
        manifest_.set_stage(name_, std::move(rec_));
        manifest_.save(layout_.manifest());
    }

private:
    const PipelineConfig& cfg_;
    Layout layout_;
    std::string name_;
    RunManifest manifest_;
    StageRecord rec_;
    std::chrono::steady_clock::time_point t0_;
};

bool pointwise(NormalizationMethod m) {
    return m == NormalizationMethod::as_float || m == NormalizationMethod::as_reflectance;
}

bool per_column(NormalizationMethod m) { return !pointwise(m); }

CompositeStack load_composite(const fs::path& p) { return composite_from_bandstack(read_bandstack(p)); }

void write_scaler(const ColumnScaler& s, const fs::path& p) {
    ordered_json j;
    j["method"] = normalization_name(s.method);
    j["offset"] = s.offset;
    j["factor"] = s.factor;
    std::ofstream out(p, std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + p.string());
    out << j.dump() << '\n';
}

ColumnScaler read_scaler(const fs::path& p) {
    std::ifstream in(p);
    if (!in)
        throw IoError("cannot open " + p.string());
    try {
        json j = json::parse(in);
        ColumnScaler s;
        s.method = parse_normalization(j.at("method").get<std::string>());
        s.offset = j.at("offset").get<std::vector<double>>();
        s.factor = j.at("factor").get<std::vector<double>>();
        return s;
    } catch (const json::exception& e) {
        throw FormatError("scaler file " + p.string() + " is corrupt: " + e.what());
    }
}

/// All training polygons in tile order, plus per-tile rasters whose polygon
/// indices point into that combined list.
struct TrainingLabels {
    std::vector<LabeledPolygon> polygons;
    std::vector<LabelRaster> rasters;   // one per configured tile
};

TrainingLabels load_training_labels(const PipelineConfig& cfg, Stage* stage) {
    TrainingLabels t;
    for (const auto& tile : cfg.tiles) {
        const auto hdr = read_bandstack_header(tile.raw);
        std::vector<LabeledPolygon> polys;
        if (!tile.labels.empty()) {
            polys = read_label_polygons(tile.labels);
            if (stage)
                stage->input(tile.labels);
        }
        LabelRaster r = rasterize_labels(polys, hdr.georef, hdr.height, hdr.width);
        const auto offset = static_cast<std::int32_t>(t.polygons.size());
        for (auto& p : r.polygon)
            if (p >= 0)
                p += offset;
        for (auto& p : polys) {
            p.id = tile.name + ":" + p.id;
            t.polygons.push_back(std::move(p));
        }
        t.rasters.push_back(std::move(r));
    }
    return t;
}

DataView view_of(const FeatureMatrix& fm) { return {fm.values, fm.rows, fm.cols}; }

void check_feature_contract(const Model& model, const PipelineConfig& cfg) {
    const auto expected = feature_names(cfg.features);
    const auto& got = feature_names(model);
    if (got != expected)
        throw SchemaError("model features (" + std::to_string(got.size()) +
                          ") do not match the configured feature spec (" + std::to_string(expected.size()) + ")");
}

/// Features of the pixels labeled in `labels`, normalized like the training data.
FeatureMatrix labeled_features(const PipelineConfig& cfg, const Layout& L, std::size_t tile_idx,
                               const LabelRaster& labels, const std::optional<ColumnScaler>& scaler) {
    const auto& tile = cfg.tiles[tile_idx];
    const CompositeStack prep = prepare_composite(load_composite(L.composite(tile.name)), cfg.normalization);
    FeatureMatrix fm = select_labeled(featurize(prep, cfg.features, static_cast<std::int32_t>(tile_idx)), labels);
    if (scaler)
        scaler->apply(fm);
    return fm;
}

std::optional<ColumnScaler> load_scaler_if_any(const PipelineConfig& cfg, const Layout& L) {
    if (!per_column(cfg.normalization))
        return std::nullopt;
    return read_scaler(L.scaler());
}

} // namespace

CompositeStack prepare_composite(const CompositeStack& c, NormalizationMethod method) {
    return append_ndvi(pointwise(method) ? normalize(c, method) : c);
}

LabelRaster label_raster_from_bandstack(const BandStack& s) {
    const MaskRaster m = mask_from_bandstack(s);
    LabelRaster r;
    r.georef = m.georef;
    r.height = m.height;
    r.width = m.width;
    r.values = m.values;
    for (auto& v : r.values)
        if (v == mask::nodata)
            v = LabelRaster::unlabeled;
    r.polygon.assign(r.values.size(), -1);
    return r;
}

void write_f32_raster(std::span<const float> values, const fs::path& path) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(values[i]);
        for (int k = 0; k < 4; ++k)
            bytes[i * 4 + static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(u >> (8 * k));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed: " + path.string());
}

std::vector<float> read_f32_raster(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % 4)
        throw TruncationError(path.string() + " is not a whole number of float32 values");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k)
            u |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(k)]) << (8 * k);
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

// ------------------------------------------------------------------ stages

void cmd_preprocess(const PipelineConfig& cfg) {
    Stage st(cfg, "preprocess");
    const auto& L = st.layout();
    if (cfg.tiles.empty())
        throw ConfigError("no tiles configured");
    ordered_json tiles = ordered_json::object();
    for (const auto& tile : cfg.tiles) {
        st.input(tile.raw);
        const BandStack raw = read_bandstack(tile.raw);
        std::vector<Band> bands;
        const auto obs = observations_from_stack(raw, cfg.scl_policy, &bands);
        if (obs.empty())
            throw DomainError("tile '" + tile.name + "' has no acquisitions");
        const int year = cfg.year.value_or(year_of(*std::min_element(
            raw.times().values.begin(), raw.times().values.end())));
        const CompositeStack comp = weekly_composite(obs, bands, raw.georef(), raw.height(), raw.width(), year);
        const std::size_t removed = static_cast<std::size_t>(std::count(comp.removed.begin(), comp.removed.end(), 1));
        if (removed == comp.plane_size())
            throw DomainError("tile '" + tile.name + "' has zero usable observations");
        const CompositeStack imputed = impute(comp, cfg.imputation);

        write_bandstack(composite_to_bandstack(imputed), Stage::prepare(L.composite(tile.name)));
        st.output(L.composite(tile.name));
        write_mask(comp.removed, comp.height, comp.width, comp.georef, Stage::prepare(L.removed_mask(tile.name)));
        st.output(L.removed_mask(tile.name));

        std::size_t valid = 0;
        for (auto v : comp.validity)
            valid += v;
        tiles[tile.name] = {{"year", year},
                            {"acquisitions", obs.size()},
                            {"removed_pixels", removed},
                            {"valid_fraction", static_cast<double>(valid) / static_cast<double>(comp.validity.size())}};
    }
    st.info()["tiles"] = std::move(tiles);
    st.info()["imputation"] = imputation_name(cfg.imputation);
    st.info()["scl_mask"] = cfg.scl_policy.codes();
    st.finish();
}

void cmd_rasterize_labels(const PipelineConfig& cfg) {
    Stage st(cfg, "rasterize-labels");
    const auto& L = st.layout();
    ordered_json counts = ordered_json::object();
    for (const auto& tile : cfg.tiles) {
        if (tile.labels.empty())
            continue;
        st.input(tile.raw);
        st.input(tile.labels);
        const auto hdr = read_bandstack_header(tile.raw);
        const auto polys = read_label_polygons(tile.labels);
        const LabelRaster r = rasterize_labels(polys, hdr.georef, hdr.height, hdr.width);
        MaskRaster m{r.georef, r.height, r.width, r.values};
        for (auto& v : m.values)
            if (v == LabelRaster::unlabeled)
                v = mask::nodata;
        write_bandstack(mask_to_bandstack(m), Stage::prepare(L.labels(tile.name)));
        st.output(L.labels(tile.name));
        const auto cc = r.class_counts();
        counts[tile.name] = {{"polygons", polys.size()}, {"non_cropland", cc[0]}, {"cropland", cc[1]}};
    }
    if (counts.empty())
        throw ConfigError("no tile has a label file");
    st.info()["label_pixels"] = std::move(counts);
    st.finish();
}

void cmd_featurize(const PipelineConfig& cfg) {
    Stage st(cfg, "featurize");
    const auto& L = st.layout();
    FeatureMatrix train;
    train.names = feature_names(cfg.features);
    train.cols = train.names.size();
    for (std::size_t i = 0; i < cfg.tiles.size(); ++i) {
        const auto& tile = cfg.tiles[i];
        if (tile.labels.empty())
            continue;
        st.input(L.composite(tile.name));
        st.input(L.labels(tile.name));
        const LabelRaster labels = label_raster_from_bandstack(read_bandstack(L.labels(tile.name)));
        train.append(labeled_features(cfg, L, i, labels, std::nullopt));
    }
    if (train.rows == 0)
        throw DomainError("no labeled, non-removed pixel to featurize");
    if (per_column(cfg.normalization)) {
        const ColumnScaler s = ColumnScaler::fit(train, cfg.normalization);
        s.apply(train);
        write_scaler(s, Stage::prepare(L.scaler()));
        st.output(L.scaler());
    }
    write_feature_matrix(train, Stage::prepare(L.train_features()));
    for (const char* ext : {".f64", ".json"}) {
        auto p = L.train_features();
        p += ext;
        st.output(p);
    }
    if (cfg.write_feature_csv) {
        auto p = L.train_features();
        p += ".csv";
        write_feature_csv(train, p);
        st.output(p);
    }
    std::size_t crop = 0;
    for (auto v : train.labels)
        crop += v;
    st.info()["rows"] = train.rows;
    st.info()["columns"] = train.cols;
    st.info()["cropland_rows"] = crop;
    st.info()["normalization"] = normalization_name(cfg.normalization);
    st.finish();
}

void cmd_folds(const PipelineConfig& cfg) {
    Stage st(cfg, "folds");
    const auto& L = st.layout();
    const TrainingLabels tl = load_training_labels(cfg, &st);
    if (tl.polygons.empty())
        throw DomainError("no training polygons");
    const SpatialFolds sf =
        make_spatial_folds(tl.polygons, cfg.block_size_m, cfg.cv_k, cfg.cv_seed_value(), cfg.dead_zone_m,
                           cfg.max_reseed);

    write_folds_csv(sf.assignment, tl.polygons, Stage::prepare(L.folds_csv()));
    st.output(L.folds_csv());

    ordered_json j;
    j["k"] = cfg.cv_k;
    j["block_size_m"] = cfg.block_size_m;
    j["seed_requested"] = cfg.cv_seed_value();
    j["seed_used"] = sf.seed_used;
    j["dead_zone_m"] = cfg.dead_zone_m;
    j["grid"] = {{"origin_x", sf.grid.origin_x}, {"origin_y", sf.grid.origin_y}, {"cols", sf.grid.cols},
                 {"rows", sf.grid.rows}, {"block_to_fold", sf.grid.block_to_fold}};
    std::vector<std::string> ids;
    for (const auto& p : tl.polygons)
        ids.push_back(p.id);
    j["polygon_ids"] = ids;
    j["polygon_fold"] = sf.assignment.polygon_fold;
    j["excluded"] = sf.assignment.excluded;
    j["fold_sizes"] = sf.assignment.fold_sizes();
    {
        std::ofstream out(Stage::prepare(L.folds_json()), std::ios::trunc);
        out << j.dump(2) << '\n';
        if (!out)
            throw IoError("cannot write " + L.folds_json().string());
    }
    st.output(L.folds_json());

    for (std::size_t i = 0; i < cfg.tiles.size(); ++i) {
        if (cfg.tiles[i].labels.empty())
            continue;
        write_bandstack(fold_raster(sf.assignment, tl.rasters[i]), Stage::prepare(L.fold_raster(cfg.tiles[i].name)));
        st.output(L.fold_raster(cfg.tiles[i].name));
    }
    st.info()["cv_seed_used"] = sf.seed_used;
    st.info()["fold_sizes"] = sf.assignment.fold_sizes();
    st.finish();
}

GridSearchResult cmd_train(const PipelineConfig& cfg) {
    Stage st(cfg, "train");
    const auto& L = st.layout();
    const FeatureMatrix fm = read_feature_matrix(L.train_features());
    if (fm.names != feature_names(cfg.features))
        throw SchemaError("training features do not match the configured feature spec; re-run featurize");
    const TrainingLabels tl = load_training_labels(cfg, nullptr);

    FoldAssignment fa;
    {
        std::ifstream in(L.folds_json());
        try {
            json j = json::parse(in);
            if (j.at("polygon_ids").get<std::vector<std::string>>().size() != tl.polygons.size())
                throw StaleInputError("fold file lists a different polygon set; re-run folds");
            const auto ids = j.at("polygon_ids").get<std::vector<std::string>>();
            for (std::size_t i = 0; i < ids.size(); ++i)
                if (ids[i] != tl.polygons[i].id)
                    throw StaleInputError("fold file lists a different polygon set; re-run folds");
            fa.k = j.at("k").get<int>();
            fa.polygon_fold = j.at("polygon_fold").get<std::vector<int>>();
            fa.excluded = j.at("excluded").get<std::vector<std::vector<std::size_t>>>();
            fa.dead_zone_radius = j.at("dead_zone_m").get<double>();
        } catch (const json::exception& e) {
            throw FormatError("fold file is corrupt: " + std::string(e.what()));
        }
    }
    const auto splits = cv_splits(fa, tl.rasters, fm);
    std::vector<CvFoldSplit> cv;
    for (const auto& s : splits)
        cv.push_back({s.train, s.validation});

    const std::uint64_t seed = cfg.model_seed_value();
    const DataView X = view_of(fm);
    GridSearchResult gs = grid_search(X, fm.labels, cv, cfg.grid, seed);
    const GridRow& best = gs.best_row();

    Model model = train_model(best.params, X, fm.labels, seed);
    set_feature_names(model, fm.names);
    write_model(model, Stage::prepare(L.model()));
    st.output(L.model());
    write_grid_csv(gs, L.grid_csv());
    st.output(L.grid_csv());
    {
        std::ofstream out(L.best_params(), std::ios::trunc);
        out << best.params.describe() << '\n';
    }
    st.output(L.best_params());

    bool degenerate = false;
    if (const auto* f = std::get_if<ForestModel>(&model))
        degenerate = f->degenerate;
    st.info()["best_params"] = best.params.describe();
    st.info()["combinations"] = gs.rows.size();
    st.info()["cv_mean"] = {{"accuracy", best.mean.accuracy},
                            {"precision", best.mean.precision},
                            {"recall", best.mean.recall},
                            {"f1", best.mean.f1}};
    st.info()["degenerate"] = degenerate;
    st.info()["model_seed"] = seed;
    if (best.params.kind == ModelKind::svm)
        st.info()["reconstructed_defaults"] = {"degree=3", "coef0=0", "gamma=scale", "tolerance=1e-3"};
    st.finish();
    return gs;
}

namespace {

struct TestData {
    std::vector<std::string> names;
    std::vector<FeatureMatrix> sets;
};

TestData load_test_sets(const PipelineConfig& cfg, const Layout& L, Stage& st,
                        const std::optional<ColumnScaler>& scaler) {
    TestData td;
    for (const auto& ts : cfg.test_sets) {
        const std::size_t ti = cfg.tile_index(ts.tile);
        st.input(ts.labels);
        st.input(L.composite(ts.tile));
        const auto hdr = read_bandstack_header(L.composite(ts.tile));
        const auto polys = read_label_polygons(ts.labels);
        const LabelRaster lr = rasterize_labels(polys, hdr.georef, hdr.height, hdr.width);
        td.names.push_back(ts.name);
        td.sets.push_back(labeled_features(cfg, L, ti, lr, scaler));
    }
    return td;
}

} // namespace

EvaluationReport cmd_evaluate(const PipelineConfig& cfg) {
    Stage st(cfg, "evaluate");
    const auto& L = st.layout();
    if (cfg.test_sets.empty())
        throw ConfigError("evaluate needs paths.test_sets");
    st.input(L.model());
    const Model model = read_model(L.model());
    check_feature_contract(model, cfg);
    const auto scaler = load_scaler_if_any(cfg, L);
    const TestData td = load_test_sets(cfg, L, st, scaler);

    std::vector<RegionResult> regions;
    for (std::size_t i = 0; i < td.sets.size(); ++i) {
        RegionResult r;
        r.name = td.names[i];
        const Prediction p = predict(model, view_of(td.sets[i]));
        r.counts = confusion(td.sets[i].labels, p.labels);
        regions.push_back(std::move(r));
    }
    const std::string model_id =
        fs::relative(L.model(), cfg.out).generic_string() + "#" + digest_hex(file_digest(L.model()));
    EvaluationReport rep = make_report(model_id, std::move(regions));
    write_report_json(rep, Stage::prepare(L.report_json()));
    write_report_csv(rep, L.report_csv());
    st.output(L.report_json());
    st.output(L.report_csv());
    st.info()["weighted_accuracy"] = rep.weighted.accuracy;
    st.finish();
    return rep;
}

ImportanceTable cmd_importance(const PipelineConfig& cfg) {
    Stage st(cfg, "importance");
    const auto& L = st.layout();
    st.input(L.model());
    const Model model = read_model(L.model());
    check_feature_contract(model, cfg);
    const auto scaler = load_scaler_if_any(cfg, L);

    FeatureMatrix eval;
    std::string source;
    if (!cfg.test_sets.empty()) {
        TestData td = load_test_sets(cfg, L, st, scaler);
        eval.names = feature_names(cfg.features);
        eval.cols = eval.names.size();
        for (const auto& s : td.sets)
            eval.append(s);
        source = "test_sets";
    } else {
        auto p = L.train_features();
        eval = read_feature_matrix(p);
        source = "training";
    }
    if (eval.rows == 0)
        throw DomainError("no rows to compute permutation importance on");
    const Predictor pred = [&](const DataView& X) { return predict(model, X, 1).labels; };
    const ImportanceTable t = permutation_importance(pred, view_of(eval), eval.labels, eval.names, cfg.n_repeats,
                                                     cfg.model_seed_value());
    write_importance_csv(t, Stage::prepare(L.importance_csv()));
    write_importance_json(t, cfg.importance_threshold, L.importance_json());
    st.output(L.importance_csv());
    st.output(L.importance_json());
    st.info()["source"] = source;
    st.info()["rows"] = eval.rows;
    st.info()["baseline_accuracy"] = t.baseline_accuracy;
    st.info()["headline_features"] = t.headline(cfg.importance_threshold).size();
    st.finish();
    return t;
}

void cmd_predict(const PipelineConfig& cfg) {
    Stage st(cfg, "predict");
    const auto& L = st.layout();
    st.input(L.model());
    const Model model = read_model(L.model());
    check_feature_contract(model, cfg);
    const auto scaler = load_scaler_if_any(cfg, L);
    const std::size_t dim = cfg.features.dimension();

    ordered_json summary = ordered_json::object();
    for (std::size_t ti = 0; ti < cfg.tiles.size(); ++ti) {
        const auto& tile = cfg.tiles[ti];
        const fs::path src = L.composite(tile.name);
        st.input(src);
        const auto hdr = read_bandstack_header(src);
        const int H = hdr.height, W = hdr.width;
        int strip = cfg.strip_rows;
        if (strip <= 0) {
            const double row_bytes =
                static_cast<double>(W) * (static_cast<double>(kWeeksPerYear) * (hdr.bands.size() + 1) * 16.0 +
                                          static_cast<double>(dim) * 8.0);
            strip = std::max(1, static_cast<int>(cfg.memory_mb * 1048576.0 / row_bytes) - 2);
        }
        strip = std::min(strip, H);

        std::vector<std::uint8_t> cls(static_cast<std::size_t>(H) * W, mask::nodata);
        std::vector<float> votes(cls.size(), std::numeric_limits<float>::quiet_NaN());
        for (int r0 = 0; r0 < H; r0 += strip) {
            const int r1 = std::min(H, r0 + strip);
            const int a = std::max(0, r0 - 1), b = std::min(H, r1 + 1);
            const CompositeStack prep =
                prepare_composite(composite_from_bandstack(read_bandstack_rows(src, a, b)), cfg.normalization);
            FeatureMatrix fm =
                featurize_rows(prep, cfg.features, r0 - a, r1 - a, static_cast<std::int32_t>(ti), a);
            if (scaler)
                scaler->apply(fm);
            const Prediction p = predict(model, view_of(fm));
            for (std::size_t i = 0; i < fm.rows; ++i) {
                const auto idx = static_cast<std::size_t>(fm.pixels[i].row) * W + fm.pixels[i].col;
                cls[idx] = p.labels[i];
                votes[idx] = static_cast<float>(p.score[i]);
            }
        }
        write_mask(cls, H, W, hdr.georef, Stage::prepare(L.mask_pgm(tile.name)));
        st.output(L.mask_pgm(tile.name));
        st.output(georef_sidecar_path(L.mask_pgm(tile.name)));
        write_bandstack(mask_to_bandstack(MaskRaster{hdr.georef, H, W, cls}), L.mask_bstk(tile.name));
        st.output(L.mask_bstk(tile.name));
        write_f32_raster(votes, L.votes(tile.name));
        st.output(L.votes(tile.name));

        std::size_t crop = 0, nodata = 0;
        for (auto v : cls) {
            crop += v == mask::cropland;
            nodata += v == mask::nodata;
        }
        summary[tile.name] = {{"strip_rows", strip}, {"cropland", crop}, {"nodata", nodata}};
    }
    st.info()["tiles"] = std::move(summary);
    st.finish();
}

SphericalFit cmd_variogram(const PipelineConfig& cfg) {
    Stage st(cfg, "variogram");
    const auto& L = st.layout();
    std::vector<VarioSample> samples;
    for (const auto& tile : cfg.tiles) {
        if (tile.labels.empty())
            continue;
        st.input(L.labels(tile.name));
        const LabelRaster lr = label_raster_from_bandstack(read_bandstack(L.labels(tile.name)));
        for (int r = 0; r < lr.height; ++r)
            for (int c = 0; c < lr.width; ++c) {
                const std::uint8_t v = lr.values[lr.index(r, c)];
                if (v == LabelRaster::unlabeled)
                    continue;
                const MapPoint p = lr.georef.pixel_center(r, c);
                samples.push_back({p.x, p.y, static_cast<double>(v)});
            }
    }
    const auto sub = cfg.random_n > 0 ? subsample_random(samples, cfg.random_n, cfg.seed)
                                      : subsample_stride(samples, cfg.stride);
    const Semivariogram vg = empirical_semivariogram(sub, cfg.bin_width_m, cfg.max_lag_m, 1);
    const SphericalFit fit = fit_spherical(vg);
    write_variogram(vg, fit, Stage::prepare(L.variogram_csv()));
    st.output(L.variogram_csv());
    auto side = L.variogram_csv();
    side.replace_extension(".fit.json");
    st.output(side);
    st.info()["samples"] = sub.size();
    st.info()["bins"] = vg.lag.size();
    st.info()["fit"] = {{"nugget", fit.nugget}, {"sill", fit.sill}, {"range", fit.range},
                        {"degenerate", fit.degenerate}};
    st.finish();
    return fit;
}

void cmd_profile(const PipelineConfig& cfg) {
    Stage st(cfg, "profile");
    const auto& L = st.layout();
    for (const auto& tile : cfg.tiles) {
        if (tile.labels.empty())
            continue;
        st.input(L.composite(tile.name));
        st.input(L.labels(tile.name));
        const CompositeStack c = append_ndvi(load_composite(L.composite(tile.name)));
        const LabelRaster lr = label_raster_from_bandstack(read_bandstack(L.labels(tile.name)));
        const NdviProfile prof = class_ndvi_profile(c, lr, cfg.sg_window, cfg.sg_order, cfg.sg_edge);
        write_profile_csv(prof, Stage::prepare(L.profile_csv(tile.name)));
        st.output(L.profile_csv(tile.name));
        st.info()[tile.name] = {{"cropland_pixels", prof.classes[1].pixels},
                                {"non_cropland_pixels", prof.classes[0].pixels}};
    }
    st.finish();
}

} // namespace cropmap
