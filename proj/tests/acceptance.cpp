// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "cropmap/diagnostics.hpp"
#include "cropmap/errors.hpp"
#include "cropmap/evaluation.hpp"
#include "cropmap/features.hpp"
#include "cropmap/parallel.hpp"
#include "cropmap/preprocess.hpp"
#include "oracles.hpp"
#include "pipeline_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

using namespace cropmap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

// ------------------------------------------------------------------ 1
Outcome feature_accounting() {
    FeatureSpec t{true, false, false, false, SpatialScope::none};
    FeatureSpec s{false, true, false, false, SpatialScope::none};
    FeatureSpec d{false, false, true, false, SpatialScope::none};
    FeatureSpec sp{false, false, false, true, SpatialScope::all};
    const std::size_t full = FeatureSpec::full().dimension();
    const std::size_t names = feature_names(FeatureSpec::full()).size();
    const std::size_t ns = FeatureSpec::no_spatial().dimension(), nd = FeatureSpec::ndvi_spatial().dimension();

    // one real featurize call on a small composite
    Rng rng(1);
    CompositeStack c;
    c.bands = {Band::B02, Band::B03, Band::B04, Band::B08};
    c.height = 3;
    c.width = 4;
    c.values.resize(53 * 4 * c.plane_size());
    for (auto& v : c.values)
        v = 0.05 + 0.5 * rng.uniform();
    c.validity.assign(53 * c.plane_size(), 1);
    c.removed.assign(c.plane_size(), 0);
    const auto fm = featurize(append_ndvi(c), FeatureSpec::full());

    const bool ok = full == 667 && names == 667 && fm.cols == 667 && fm.rows == 12 && t.dimension() == 70 &&
                    s.dimension() == 15 && d.dimension() == 52 && sp.dimension() == 530 && ns == 137 && nd == 243;
    std::ostringstream o;
    o << "full=" << full << " featurize=" << fm.cols << " groups=" << t.dimension() << "/" << s.dimension() << "/"
      << d.dimension() << "/" << sp.dimension() << " no_spatial=" << ns << " ndvi_spatial=" << nd;
    return {ok, o.str()};
}

// ------------------------------------------------------------------ 2
Outcome table5_arithmetic() {
    const std::vector<Metrics> rows{{0.91, 0.91, 0.90, 0.915}, {0.87, 0.87, 0.89, 0.875}, {0.81, 0.85, 0.805, 0.805}};
    const std::vector<double> w{13825, 1965, 9680};
    const Metrics m = weighted_average(rows, w);
    const bool ok = std::abs(m.accuracy - 0.869) <= 0.001 && std::abs(m.precision - 0.884) <= 0.001 &&
                    std::abs(m.recall - 0.863) <= 0.001 && std::abs(m.f1 - 0.870) <= 0.001;
    return {ok, fmt("acc %.4f prec %.4f rec %.4f f1 %.4f", m.accuracy, m.precision, m.recall, m.f1)};
}

// ------------------------------------------------------------------ 3, 9b
struct SynthRun {
    double cv_accuracy = 0;
    double agreement = 0;
    double seconds = 0;
};

SynthRun synthetic_pipeline(const fs::path& dir, const SyntheticTile& tile, const nlohmann::json& extra) {
    const auto start = std::chrono::steady_clock::now();
    // default model section: Table S2 forest (entropy, depth 15, 100 trees, max_samples 0.5)
    nlohmann::json patch = {{"model", nullptr}};
    patch.merge_patch(extra);
    const auto cfg = load_config(testsupport::write_workspace(dir, tile, patch));
    testsupport::run_stages(cfg, {"preprocess", "rasterize-labels", "featurize", "folds"});
    const auto gs = cmd_train(cfg);
    cmd_predict(cfg);
    const auto mask = read_mask(Layout{cfg.out}.mask_pgm("synth"));
    std::size_t agree = 0;
    for (std::size_t p = 0; p < mask.values.size(); ++p)
        agree += mask.values[p] == tile.truth[p];
    SynthRun r;
    r.cv_accuracy = gs.best_row().mean.accuracy;
    r.agreement = static_cast<double>(agree) / static_cast<double>(mask.values.size());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

const SyntheticTile& acceptance_tile() {
    static const SyntheticTile t = [] {
        SyntheticSpec s;   // 128 x 128, 20% clouds
        s.seed = 2020;
        return make_synthetic_tile(s);
    }();
    return t;
}

Outcome synthetic_end_to_end() {
    testsupport::TempDir dir("acc3");
    const auto& tile = acceptance_tile();
    const bool shape = tile.raw.height() == 128 && tile.raw.width() == 128 && tile.raw.band_count() == 5;
    const auto r = synthetic_pipeline(dir.path(), tile, nlohmann::json::object());
    const bool ok = shape && r.cv_accuracy >= 0.95 && r.agreement >= 0.95 && r.seconds <= 300.0;
    return {ok, fmt("cv accuracy %.4f, map agreement %.4f, %.1f s", r.cv_accuracy, r.agreement, r.seconds)};
}

// ------------------------------------------------------------------ 4
Outcome split_oracle() {
    int bad = 0, total = 0;
    std::string first;
    for (std::uint64_t seed = 1; seed <= 100; ++seed)
        for (auto crit : {Criterion::gini, Criterion::entropy}) {
            ++total;
            auto err = oracle::check_split_oracle(seed, crit);
            if (!err.empty() && bad++ == 0)
                first = err;
        }
    return {bad == 0, std::to_string(total - bad) + "/" + std::to_string(total) + " datasets exact" +
                          (first.empty() ? "" : "; " + first)};
}

// ------------------------------------------------------------------ 5
Outcome svm_dual() {
    int bad = 0;
    double worst = 0, worst_eq = 0;
    std::string first;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto r = oracle::check_svm_dual(seed);
        worst = std::max(worst, std::abs(r.smo - r.brute));
        worst_eq = std::max(worst_eq, std::abs(r.equality));
        if (!r.error.empty() && bad++ == 0)
            first = r.error;
    }
    const bool ok = bad == 0 && worst <= 1e-3 && worst_eq <= 1e-9;
    return {ok, fmt("max |smo - brute| %.2e, max |sum a y| %.2e", worst, worst_eq) + (first.empty() ? "" : "; " + first)};
}

// ------------------------------------------------------------------ 6
Outcome cv_properties() {
    int checked = 0, bad = 0;
    std::string first;
    for (std::uint64_t seed = 1; checked < 200 && seed <= 2000; ++seed) {
        auto err = oracle::check_cv_layout(seed);
        if (err == "skip")
            continue;
        ++checked;
        if (!err.empty() && bad++ == 0)
            first = "seed " + std::to_string(seed) + ": " + err;
    }
    return {checked == 200 && bad == 0,
            std::to_string(checked - bad) + "/" + std::to_string(checked) + " layouts" + (first.empty() ? "" : "; " + first)};
}

// ------------------------------------------------------------------ 7
Outcome variogram() {
    int bad = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        bad += !oracle::check_variogram_oracle(seed, 200).empty();

    Semivariogram vg;
    vg.bin_width = 250;
    vg.max_lag = 10000;
    for (std::size_t b = 0; b < 40; ++b) {
        const double h = (b + 0.5) * 250;
        vg.bin.push_back(b);
        vg.lag.push_back(h);
        vg.mean_distance.push_back(h);
        vg.pairs.push_back(1000);
        vg.gamma.push_back(spherical_model(h, 0.0, 1.0, 3000.0));
    }
    const auto fit = fit_spherical(vg);
    const double e_sill = std::abs(fit.sill - 1.0), e_range = std::abs(fit.range - 3000.0) / 3000.0;
    // nugget 0 has no relative scale; judged against the sill
    const double e_nug = std::abs(fit.nugget) / 1.0;

    Rng rng(3);
    std::vector<VarioSample> s(200);
    for (auto& p : s)
        p = {rng.uniform() * 5000, rng.uniform() * 5000, 1.0};
    const auto flat = empirical_semivariogram(s, 250, 3000);
    bool zero = !flat.gamma.empty();
    for (double g : flat.gamma)
        zero = zero && g == 0.0;

    const bool ok = bad == 0 && e_sill <= 0.05 && e_range <= 0.05 && e_nug <= 0.05 && zero;
    return {ok, std::to_string(20 - bad) + "/20 oracle layouts; fit nugget " + fmt("%.4f sill %.4f range %.1f", fit.nugget,
                                                                                   fit.sill, fit.range) +
                    (zero ? "; constant field gamma == 0" : "; constant field gamma != 0")};
}

// ------------------------------------------------------------------ 8
Outcome savgol() {
    Rng rng(8);
    double worst_poly = 0, worst_lin = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int deg = trial % 4;
        std::vector<double> c(4, 0.0);
        for (int k = 0; k <= deg; ++k)
            c[static_cast<std::size_t>(k)] = rng.uniform() * 2 - 1;
        std::vector<double> x(53), u(53), v(53), mix(53);
        const double a = rng.normal() * 2, b = rng.normal() * 2;
        for (int w = 0; w < 53; ++w) {
            const double t = (w - 26) / 10.0;
            x[w] = c[0] + c[1] * t + c[2] * t * t + c[3] * t * t * t;
            u[w] = rng.normal();
            v[w] = rng.normal();
            mix[w] = a * u[w] + b * v[w];
        }
        const auto sx = savgol_smooth(x, 9, 3);
        const auto su = savgol_smooth(u, 9, 3), sv = savgol_smooth(v, 9, 3), sm = savgol_smooth(mix, 9, 3);
        for (int w = 0; w < 53; ++w) {
            worst_poly = std::max(worst_poly, std::abs(sx[w] - x[w]));
            worst_lin = std::max(worst_lin, std::abs(sm[w] - (a * su[w] + b * sv[w])));
        }
    }
    return {worst_poly <= 1e-9 && worst_lin <= 1e-9,
            fmt("max polynomial error %.2e, max linearity error %.2e", worst_poly, worst_lin)};
}

// ------------------------------------------------------------------ 9
Outcome imputation() {
    Rng rng(9);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double a = rng.uniform() * 4000, s = rng.normal() * 50;
        std::vector<double> truth(53), series(53);
        std::vector<std::uint8_t> valid(53);
        for (int w = 0; w < 53; ++w) {
            truth[w] = a + s * w;
            valid[w] = w == 0 || w == 52 || rng.uniform() < 0.3;
            series[w] = valid[w] ? truth[w] : -1.0;
        }
        impute_series(series, valid, ImputationMethod::linear);
        for (int w = 0; w < 53; ++w)
            worst = std::max(worst, std::abs(series[w] - truth[w]) / std::max(1.0, std::abs(truth[w])));
    }
    testsupport::TempDir dir("acc9");
    const auto& tile = acceptance_tile();
    const auto lin = synthetic_pipeline(dir / "linear", tile, {{"preprocess", {{"imputation", "linear"}}}});
    const auto ff = synthetic_pipeline(dir / "ffill", tile, {{"preprocess", {{"imputation", "ffill"}}}});
    const bool ok = worst <= 1e-12 && lin.cv_accuracy >= ff.cv_accuracy;
    return {ok, fmt("affine max rel error %.2e; cv accuracy linear %.4f vs ffill %.4f", worst, lin.cv_accuracy,
                    ff.cv_accuracy)};
}

// ------------------------------------------------------------------ 10
Outcome importance() {
    // unused columns: a constant column and a column the predictor never reads
    Rng rng(10);
    const std::size_t n = 400;
    std::vector<double> x(n * 4);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i * 4] = rng.normal();
        x[i * 4 + 1] = rng.normal();
        x[i * 4 + 2] = 3.0;
        x[i * 4 + 3] = rng.normal();
        y[i] = x[i * 4] + 0.5 * x[i * 4 + 1] > 0;
    }
    const DataView X{x, n, 4};
    ForestParams p;
    p.n_estimators = 20;
    p.max_depth = 6;
    std::vector<double> x3(n * 3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            x3[i * 3 + j] = x[i * 4 + j];
    const auto model = train_forest(DataView{x3, n, 3}, y, p, 11, 1);
    // column 3 is invisible to the model; column 2 is constant
    auto pred = [&](const DataView& v) {
        std::vector<double> sub(v.rows * 3);
        for (std::size_t i = 0; i < v.rows; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                sub[i * 3 + j] = v.at(i, j);
        return predict_forest(model, DataView{sub, v.rows, 3}, 1).labels;
    };
    const std::vector<std::string> names{"a", "b", "const", "unused"};
    const auto t = permutation_importance(pred, X, y, names, 5, 12, 1);
    bool zeros = true;
    for (const auto& f : t.features)
        if (f.column >= 2)
            zeros = zeros && f.mean == 0.0 && f.std == 0.0;

    int first = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed)
        first += oracle::two_feature_importance(seed).informative_first;
    return {zeros && first >= 95,
            std::string(zeros ? "unused columns exactly 0" : "unused column nonzero") + "; informative first in " +
                std::to_string(first) + "/100"};
}

// ------------------------------------------------------------------ 11
std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& root) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json")
            out[fs::relative(e.path(), root).string()] = testsupport::read_bytes(e.path());
    return out;
}

Outcome determinism() {
    testsupport::TempDir dir("acc11");
    SyntheticSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.seed = 11;
    spec.removed_pixels = {{5, 5}};
    const auto tile = make_synthetic_tile(spec);
    const nlohmann::json model = {{"grid",
                                   {{"n_estimators", {30}}, {"criterion", {"entropy"}}, {"max_depth", {15}},
                                    {"max_samples", {0.5}}}}};

    std::vector<std::map<std::string, std::vector<std::uint8_t>>> runs;
    for (unsigned threads : {1u, 4u, 8u}) {
        const fs::path ws = dir / ("t" + std::to_string(threads));
        const auto cfg = load_config(testsupport::write_workspace(ws, tile, {{"model", model}, {"threads", threads}}));
        set_default_threads(threads);
        testsupport::run_stages(cfg, {"preprocess", "rasterize-labels", "featurize", "folds", "train", "evaluate",
                                      "importance", "predict", "variogram", "profile"});
        runs.push_back(tree_bytes(ws / "out"));
    }
    const bool threads_ok = runs[0].size() > 10 && runs[0] == runs[1] && runs[0] == runs[2];

    // strip heights on the 1-thread workspace
    bool strips_ok = true;
    const fs::path ws = dir / "t1";
    std::vector<std::uint8_t> ref_mask, ref_votes;
    for (int strip : {8, 64}) {
        set_default_threads(1);
        const auto cfg = load_config(ws / "config.json", {{"predict", {{"strip_rows", strip}}}});
        cmd_predict(cfg);
        const Layout L{cfg.out};
        auto m = testsupport::read_bytes(L.mask_pgm("synth")), v = testsupport::read_bytes(L.votes("synth"));
        if (ref_mask.empty()) {
            ref_mask = m;
            ref_votes = v;
        } else {
            strips_ok = m == ref_mask && v == ref_votes;
        }
    }
    set_default_threads(0);

    // BSTK and model byte round trips
    bool rt_ok = true;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto st = testsupport::random_stack(seed, static_cast<int>(1 + seed % 5), static_cast<int>(3 + seed % 7), static_cast<int>(2 + seed % 9));
        const fs::path a = dir / "a.bstk", b = dir / "b.bstk";
        write_bandstack(st, a);
        const auto back = read_bandstack(a);
        write_bandstack(back, b);
        rt_ok = rt_ok && back == st && testsupport::read_bytes(a) == testsupport::read_bytes(b);
    }
    const Layout L{ws / "out"};
    const auto m = read_model(L.model());
    write_model(m, dir / "model2.json");
    rt_ok = rt_ok && testsupport::read_bytes(L.model()) == testsupport::read_bytes(dir / "model2.json");

    std::string mism;
    if (!threads_ok)
        for (const auto& [k, v] : runs[0])
            if (runs[1].count(k) == 0 || runs[1][k] != v || runs[2].count(k) == 0 || runs[2][k] != v)
                mism += " " + k;
    return {threads_ok && strips_ok && rt_ok,
            std::to_string(runs[0].size()) + " artifacts identical at 1/4/8 threads: " + (threads_ok ? "yes" : "no" + mism) +
                "; strips 8 vs 64: " + (strips_ok ? "yes" : "no") + "; round trips: " + (rt_ok ? "yes" : "no")};
}

} // namespace

int main() {
    struct Criterion_ {
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion_> all{
        {"feature accounting", feature_accounting},
        {"table 5 arithmetic", table5_arithmetic},
        {"synthetic end-to-end", synthetic_end_to_end},
        {"split oracle", split_oracle},
        {"svm dual oracle", svm_dual},
        {"spatial cv properties", cv_properties},
        {"semivariogram", variogram},
        {"savitzky-golay", savgol},
        {"imputation", imputation},
        {"permutation importance", importance},
        {"determinism and streaming", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        Outcome o;
        try {
            o = all[i].run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s %2zu %-26s %s\n", o.pass ? "PASS" : "FAIL", i + 1, all[i].name, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", all.size() - failed, all.size());
    return failed == 0 ? 0 : 1;
}
