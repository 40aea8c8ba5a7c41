#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cropmap/classifiers.hpp"
#include "cropmap/errors.hpp"
#include "cropmap/random.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>

using namespace cropmap;

namespace {

struct Data {
    std::vector<double> x;
    std::vector<std::uint8_t> y;
    std::size_t n = 0, d = 0;
    DataView view() const { return {x, n, d}; }
};

/// Noisy threshold rule on the first two features plus distractors.
Data noisy_rule(std::uint64_t seed, std::size_t n, std::size_t d, double noise = 0.1) {
    Rng rng(seed);
    Data D;
    D.n = n;
    D.d = d;
    D.x.resize(n * d);
    D.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j)
            D.x[i * d + j] = rng.normal();
        bool c = D.x[i * d] + 0.5 * D.x[i * d + 1] > 0.2;
        if (rng.uniform() < noise)
            c = !c;
        D.y[i] = c;
    }
    return D;
}

Data blobs(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    Data D;
    D.n = n;
    D.d = 2;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t c = i % 2;
        const double m = c ? 3.0 : -3.0;
        D.x.push_back(m + 0.5 * rng.normal());
        D.x.push_back(m + 0.5 * rng.normal());
        D.y.push_back(c);
    }
    return D;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    for (std::size_t i = 0; i < n; ++i)
        r[i] = i;
    return r;
}

std::string serialize(const Model& m) { return model_to_json(m).dump(); }

} // namespace

TEST_CASE("impurity") {
    const std::size_t half[] = {5, 5}, pure[] = {7, 0}, pure1[] = {0, 3};
    CHECK(impurity(half, Criterion::gini) == 0.5);
    CHECK(impurity(half, Criterion::entropy) == 1.0);
    CHECK(impurity(pure, Criterion::gini) == 0.0);
    CHECK(impurity(pure, Criterion::entropy) == 0.0);
    CHECK(impurity(pure1, Criterion::gini) == 0.0);
    CHECK(impurity(pure1, Criterion::entropy) == 0.0);
    CHECK(parse_criterion("entropy") == Criterion::entropy);
    CHECK_THROWS_AS(parse_criterion("log_loss"), ConfigError);
}

TEST_CASE("best split examples") {
    std::vector<double> x{1, 2, 9, 10};
    std::vector<std::uint8_t> y{0, 0, 1, 1};
    std::vector<std::size_t> rows{0, 1, 2, 3}, feats{0};
    DataView X{x, 4, 1};
    for (auto c : {Criterion::gini, Criterion::entropy}) {
        auto s = best_split(X, y, rows, feats, c);
        REQUIRE(s);
        CHECK(s->feature == 0);
        CHECK(s->threshold == 5.5);
        const std::size_t counts[] = {2, 2};
        CHECK(s->gain == impurity(counts, c));
    }
    std::vector<std::uint8_t> same{1, 1, 1, 1};
    CHECK_FALSE(best_split(X, same, rows, feats, Criterion::gini));
    // constant feature: nothing to split on
    std::vector<double> flat{3, 3, 3, 3};
    CHECK_FALSE(best_split(DataView{flat, 4, 1}, y, rows, feats, Criterion::gini));
    // identical columns tie: lower feature wins
    std::vector<double> twin{1, 1, 2, 2, 9, 9, 10, 10};
    std::vector<std::size_t> both{1, 0};
    auto s = best_split(DataView{twin, 4, 2}, y, rows, both, Criterion::gini);
    REQUIRE(s);
    CHECK(s->feature == 0);
}

TEST_CASE("best split matches the exhaustive scan") {
    for (std::uint64_t seed = 1; seed <= 100; ++seed)
        for (auto c : {Criterion::gini, Criterion::entropy}) {
            INFO("seed " << seed);
            CHECK(oracle::check_split_oracle(seed, c) == "");
        }
}

TEST_CASE("single tree forest equals the reference tree") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto D = noisy_rule(seed, 80, 4, 0.2);
        for (auto crit : {Criterion::gini, Criterion::entropy})
            for (int depth : {0, 3}) {
                ForestParams p;
                p.n_estimators = 1;
                p.bootstrap = false;
                p.max_samples = 1.0;
                p.max_features = D.d;
                p.criterion = crit;
                p.max_depth = depth;
                auto m = train_forest(D.view(), D.y, p, seed);
                std::vector<TreeNode> ref;
                oracle::reference_tree(D.view(), D.y, iota_rows(D.n), crit, depth, 0, ref);
                CHECK(m.trees[0].nodes == ref);
            }
    }
}

TEST_CASE("forest basics") {
    SUBCASE("single-class labels give a degenerate model") {
        auto D = noisy_rule(3, 30, 3);
        std::fill(D.y.begin(), D.y.end(), 1);
        auto m = train_forest(D.view(), D.y, ForestParams{}, 1);
        CHECK(m.degenerate);
        auto pr = predict_forest(m, D.view());
        for (std::size_t i = 0; i < D.n; ++i) {
            CHECK(pr.labels[i] == 1);
            CHECK(pr.score[i] == 1.0);
        }
    }
    SUBCASE("hand-built trees: routing and ties") {
        // root: x1 <= 0.5 ? leaf 0 : leaf 1
        DecisionTree t;
        t.nodes = {TreeNode{1, 0.5, 1, 2, 0, 3, 3}, TreeNode{-1, 0, -1, -1, 0, 3, 0}, TreeNode{-1, 0, -1, -1, 1, 0, 3}};
        DecisionTree ones;
        ones.nodes = {TreeNode{-1, 0, -1, -1, 1, 0, 1}};
        DecisionTree zeros;
        zeros.nodes = {TreeNode{-1, 0, -1, -1, 0, 1, 0}};
        ForestModel m;
        m.n_features = 2;
        m.trees = {t};
        std::vector<double> x{9.0, 0.5, -9.0, 0.50000001, 0.0, -3.0};
        DataView X{x, 3, 2};
        auto pr = predict_forest(m, X);
        CHECK(pr.labels == std::vector<std::uint8_t>{0, 1, 0});   // x <= t goes left
        CHECK(t.depth() == 1);
        m.trees = {ones, ones};
        CHECK(predict_forest(m, X).labels == std::vector<std::uint8_t>{1, 1, 1});
        CHECK(predict_forest(m, X).score[0] == 1.0);
        m.trees = {ones, zeros};
        auto tie = predict_forest(m, X);
        CHECK(tie.labels == std::vector<std::uint8_t>{0, 0, 0});
        CHECK(tie.score[0] == 0.5);
        std::vector<double> wide(9, 0.0);
        CHECK_THROWS_AS(predict_forest(m, DataView{wide, 3, 3}), SchemaError);
    }
    SUBCASE("parameter checks") {
        auto D = noisy_rule(4, 20, 2);
        ForestParams p;
        p.max_samples = 0.0;
        CHECK_THROWS_AS(train_forest(D.view(), D.y, p, 1), ConfigError);
        p.max_samples = 1.0;
        p.n_estimators = 0;
        CHECK_THROWS_AS(train_forest(D.view(), D.y, p, 1), ConfigError);
    }
}

TEST_CASE("forest determinism across worker counts") {
    auto D = noisy_rule(5, 300, 10);
    ForestParams p;
    p.n_estimators = 40;
    p.max_samples = 0.8;
    p.criterion = Criterion::entropy;
    const auto ref = serialize(train_forest(D.view(), D.y, p, 77, 1));
    for (unsigned t : {2u, 4u, 8u})
        CHECK(serialize(train_forest(D.view(), D.y, p, 77, t)) == ref);
    CHECK(serialize(train_forest(D.view(), D.y, p, 78, 1)) != ref);
    auto m = train_forest(D.view(), D.y, p, 77, 1);
    auto a = predict_forest(m, D.view(), 1);
    auto b = predict_forest(m, D.view(), 8);
    CHECK(a.labels == b.labels);
    CHECK(a.score == b.score);
}

TEST_CASE("forest structure respects max_depth and leaf majority") {
    auto D = noisy_rule(6, 400, 6, 0.3);
    for (int depth : {1, 2, 5, 10}) {
        ForestParams p;
        p.n_estimators = 10;
        p.max_depth = depth;
        auto m = train_forest(D.view(), D.y, p, 3);
        REQUIRE(m.trees.size() == 10);
        for (const auto& t : m.trees) {
            CHECK(t.depth() <= depth);
            for (const auto& n : t.nodes) {
                if (n.is_leaf()) {
                    CHECK(n.n0 + n.n1 > 0);
                    CHECK(n.cls == (n.n1 > n.n0 ? 1 : 0));
                } else {
                    CHECK(n.feature < static_cast<int>(D.d));
                    CHECK(n.left > 0);
                    CHECK(n.right > 0);
                }
            }
        }
    }
}

TEST_CASE("forest is invariant to strictly monotone feature transforms") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto D = noisy_rule(seed, 150, 4, 0.2);
        auto T = D;
        for (std::size_t i = 0; i < D.n * D.d; ++i) {
            const double v = D.x[i];
            T.x[i] = (i % D.d == 1) ? -std::exp(-v) : v * v * v + 2 * v;   // increasing maps
        }
        ForestParams p;
        p.n_estimators = 25;
        p.max_samples = 0.8;
        auto a = train_forest(D.view(), D.y, p, seed);
        auto b = train_forest(T.view(), T.y, p, seed);
        // same partitions of the same bootstrap rows: only thresholds move
        for (std::size_t t = 0; t < a.trees.size(); ++t) {
            auto na = a.trees[t].nodes, nb = b.trees[t].nodes;
            REQUIRE(na.size() == nb.size());
            for (auto& n : na)
                n.threshold = 0;
            for (auto& n : nb)
                n.threshold = 0;
            CHECK(na == nb);
        }
        // without bootstrap every training row reaches its nodes as a split candidate,
        // so votes on the training rows agree exactly
        p.bootstrap = false;
        auto c = train_forest(D.view(), D.y, p, seed);
        auto d = train_forest(T.view(), T.y, p, seed);
        CHECK(predict_forest(c, D.view()).score == predict_forest(d, T.view()).score);
    }
}

TEST_CASE("svm on separable blobs") {
    auto D = blobs(1, 60);
    SvmParams p;
    p.C = 1.0;
    p.kernel = Kernel::rbf;
    auto m = train_svm(D.view(), D.y, p);
    CHECK(predict_svm(m, D.view()).labels == D.y);
    p.kernel = Kernel::poly;
    auto mp = train_svm(D.view(), D.y, p);
    CHECK(predict_svm(mp, D.view()).labels == D.y);
}

TEST_CASE("gamma scale") {
    std::vector<double> same(12, 4.0);
    CHECK_THROWS_AS(gamma_scale(DataView{same, 4, 3}), ConfigError);
    std::vector<double> y01(4, 0);
    std::vector<std::uint8_t> lab{0, 1, 0, 1};
    CHECK_THROWS_AS(train_svm(DataView{same, 4, 3}, lab, SvmParams{}), ConfigError);
    std::vector<double> v{0, 2, 0, 2};   // mean 1, variance 1
    CHECK(gamma_scale(DataView{v, 2, 2}) == 0.5);
    std::vector<double> a{1, 2}, b{2, 0};
    CHECK(kernel_value(Kernel::rbf, 0.5, 3, 0, a, b) == doctest::Approx(std::exp(-0.5 * 5)));
    CHECK(kernel_value(Kernel::poly, 0.5, 3, 0, a, b) == doctest::Approx(1.0));
}

TEST_CASE("svm dual matches brute force") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto r = oracle::check_svm_dual(seed);
        INFO("seed " << seed << " smo " << r.smo << " brute " << r.brute);
        CHECK(r.error == "");
        CHECK(std::abs(r.equality) <= 1e-9);
    }
}

TEST_CASE("svm KKT conditions at convergence") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto D = noisy_rule(seed, 120, 3, 0.15);
        for (auto kernel : {Kernel::rbf, Kernel::poly}) {
            SvmParams p;
            p.C = seed % 2 ? 1.0 : 10.0;
            p.kernel = kernel;
            SvmSolution sol;
            auto m = train_svm(D.view(), D.y, p, &sol);
            // independent m(a) - M(a) from the gradient
            const double g = m.gamma;
            std::vector<double> yy(D.n);
            for (std::size_t i = 0; i < D.n; ++i)
                yy[i] = D.y[i] ? 1.0 : -1.0;
            double up = -1e300, low = 1e300, eq = 0;
            for (std::size_t i = 0; i < D.n; ++i) {
                CHECK(sol.alpha[i] >= 0.0);
                CHECK(sol.alpha[i] <= p.C);
                eq += sol.alpha[i] * yy[i];
                double grad = -1.0;
                for (std::size_t j = 0; j < D.n; ++j)
                    grad += yy[i] * yy[j] * sol.alpha[j] *
                            kernel_value(kernel, g, 3, 0.0, D.view().row(i), D.view().row(j));
                const double v = -yy[i] * grad;
                const bool in_up = (yy[i] > 0 && sol.alpha[i] < p.C) || (yy[i] < 0 && sol.alpha[i] > 0);
                const bool in_low = (yy[i] > 0 && sol.alpha[i] > 0) || (yy[i] < 0 && sol.alpha[i] < p.C);
                if (in_up)
                    up = std::max(up, v);
                if (in_low)
                    low = std::min(low, v);
            }
            CHECK(std::abs(eq) < 1e-9);
            CHECK(up - low <= p.tolerance + 1e-9);
            CHECK(sol.max_violation <= p.tolerance);
            // the model's decision values agree with the dual expansion
            double sv_count = 0;
            for (double a : sol.alpha)
                sv_count += a > 0;
            CHECK(m.support_count() == static_cast<std::size_t>(sv_count));
        }
    }
}

TEST_CASE("svm iteration budget") {
    auto D = noisy_rule(9, 200, 3, 0.3);
    SvmParams p;
    p.C = 100;
    p.max_iter = 3;
    CHECK_THROWS_AS(train_svm(D.view(), D.y, p), ConvergenceError);
}

TEST_CASE("model serialization round trip") {
    testsupport::TempDir dir("models");
    auto D = noisy_rule(10, 150, 5);
    Rng rng(1);
    std::vector<double> probe(500 * 5);
    for (auto& v : probe)
        v = rng.normal() * 2;
    DataView P{probe, 500, 5};

    ModelParams rf;
    rf.forest.n_estimators = 15;
    rf.forest.max_depth = 6;
    ModelParams svm;
    svm.kind = ModelKind::svm;
    svm.svm.C = 0.5;
    svm.svm.kernel = Kernel::poly;
    for (const auto& mp : {rf, svm}) {
        Model m = train_model(mp, D.view(), D.y, 4);
        set_feature_names(m, {"a", "b", "c", "d", "e"});
        write_model(m, dir / "m.json");
        Model back = read_model(dir / "m.json");
        CHECK(back == m);
        CHECK(feature_names(back)[4] == "e");
        auto p1 = predict(m, P), p2 = predict(back, P);
        CHECK(p1.labels == p2.labels);
        CHECK(p1.score == p2.score);
        write_model(back, dir / "again.json");
        CHECK(testsupport::read_bytes(dir / "m.json") == testsupport::read_bytes(dir / "again.json"));
    }
    std::ofstream(dir / "bad.json") << R"({"kind":"rf","trees":[[{"f":9,"t":0,"l":1,"r":2}]]})";
    CHECK_THROWS(read_model(dir / "bad.json"));
}

TEST_CASE("hyper-parameter grids") {
    auto rf = HyperParamGrid::forest_search_space().enumerate();
    CHECK(rf.size() == 54);
    CHECK(rf.front().describe() == "criterion=gini, max_depth=5, max_samples=0.5, n_estimators=100");
    CHECK(rf[1].describe() == "criterion=gini, max_depth=5, max_samples=0.8, n_estimators=100");
    CHECK(rf.back().describe() == "criterion=entropy, max_depth=15, max_samples=1, n_estimators=500");
    ModelParams best;
    best.forest.criterion = Criterion::entropy;
    best.forest.max_depth = 15;
    best.forest.max_samples = 0.5;
    CHECK(best.describe() == "criterion=entropy, max_depth=15, max_samples=0.5, n_estimators=100");
    auto svm = HyperParamGrid::svm_search_space().enumerate();
    CHECK(svm.size() == 8);
    CHECK(svm.front().describe() == "C=0.5, gamma=scale, kernel=poly");
    CHECK(svm.back().describe() == "C=100, gamma=scale, kernel=rbf");
}

TEST_CASE("grid search") {
    auto D = noisy_rule(11, 240, 4, 0.1);
    std::vector<CvFoldSplit> splits(3);
    for (std::size_t i = 0; i < D.n; ++i)
        for (std::size_t f = 0; f < 3; ++f)
            (i % 3 == f ? splits[f].validation : splits[f].train).push_back(i);

    SUBCASE("one combination is the best and matches direct training") {
        HyperParamGrid g;
        g.n_estimators = {20};
        auto res = grid_search(D.view(), D.y, splits, g, 5, 2);
        REQUIRE(res.rows.size() == 1);
        CHECK(res.best == 0);
        CHECK(res.best_row().ok);
        // fold 0 by hand
        auto tr = splits[0].train;
        std::vector<double> x;
        std::vector<std::uint8_t> y;
        for (auto i : tr) {
            auto r = D.view().row(i);
            x.insert(x.end(), r.begin(), r.end());
            y.push_back(D.y[i]);
        }
        ForestParams fp;
        fp.n_estimators = 20;
        auto m = train_forest(DataView{x, tr.size(), D.d}, y, fp, 5);
        std::vector<double> vx;
        std::vector<std::uint8_t> vy;
        for (auto i : splits[0].validation) {
            auto r = D.view().row(i);
            vx.insert(vx.end(), r.begin(), r.end());
            vy.push_back(D.y[i]);
        }
        auto pr = predict_forest(m, DataView{vx, vy.size(), D.d});
        CHECK(res.rows[0].per_fold[0] == metrics(confusion(vy, pr.labels)));
    }
    SUBCASE("failing cells disqualify their combination") {
        HyperParamGrid g;
        g.n_estimators = {10};
        g.max_samples = {0.0, 1.0};
        auto res = grid_search(D.view(), D.y, splits, g, 5);
        REQUIRE(res.rows.size() == 2);
        CHECK_FALSE(res.rows[0].ok);
        CHECK_FALSE(res.rows[0].error.empty());
        CHECK(res.best == 1);
        g.max_samples = {0.0};
        CHECK_THROWS_AS(grid_search(D.view(), D.y, splits, g, 5), ConfigError);
    }
    SUBCASE("results do not depend on threads; ties go to the first combination") {
        HyperParamGrid g;
        g.n_estimators = {5, 5};
        g.max_depth = {2, 0};
        auto a = grid_search(D.view(), D.y, splits, g, 9, 1);
        auto b = grid_search(D.view(), D.y, splits, g, 9, 4);
        REQUIRE(a.rows.size() == 4);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(a.rows[i].mean == b.rows[i].mean);
        CHECK(a.best == b.best);
        CHECK(a.rows[0].mean == a.rows[2].mean);   // duplicated n_estimators value
        CHECK(a.best < 2);
    }
    SUBCASE("grid csv") {
        testsupport::TempDir dir("grid");
        HyperParamGrid g;
        g.n_estimators = {5};
        g.criterion = {Criterion::gini, Criterion::entropy};
        auto res = grid_search(D.view(), D.y, splits, g, 1);
        write_grid_csv(res, dir / "grid.csv");
        std::ifstream in(dir / "grid.csv");
        std::string header, line;
        std::getline(in, header);
        CHECK(header.find("mean_accuracy") != std::string::npos);
        CHECK(header.find("fold0_accuracy") != std::string::npos);
        int n = 0;
        while (std::getline(in, line))
            ++n;
        CHECK(n == 2);
    }
}
