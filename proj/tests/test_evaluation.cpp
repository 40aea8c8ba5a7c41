#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cropmap/classifiers.hpp"
#include "cropmap/errors.hpp"
#include "cropmap/evaluation.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <algorithm>
#include <fstream>
#include <set>

using namespace cropmap;

TEST_CASE("confusion and metrics") {
    std::vector<std::uint8_t> t{1, 1, 0, 0, 1, 0}, p{1, 0, 0, 1, 1, 0};
    auto c = confusion(t, p);
    CHECK(c == ConfusionCounts{2, 1, 1, 2});
    CHECK(c.total() == 6);
    auto m = metrics(ConfusionCounts{5, 0, 0, 5});
    CHECK(m == Metrics{1, 1, 1, 1});
    // precision = recall = 0.9
    auto e = metrics(ConfusionCounts{9, 1, 1, 89});
    CHECK(e.precision == doctest::Approx(0.9));
    CHECK(e.recall == doctest::Approx(0.9));
    CHECK(e.f1 == doctest::Approx(0.9));
    auto z = metrics(ConfusionCounts{0, 0, 4, 6});
    CHECK(z.precision == 0.0);
    CHECK(z.recall == 0.0);
    CHECK(z.f1 == 0.0);
    CHECK(z.accuracy == 0.6);
    CHECK(metrics(ConfusionCounts{}) == Metrics{});
    std::vector<std::uint8_t> shorter{1};
    CHECK_THROWS(confusion(t, shorter));
}

TEST_CASE("metrics stay in [0, 1]; accuracy is exact") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        ConfusionCounts c{rng.below(50), rng.below(50), rng.below(50), rng.below(50)};
        if (c.total() == 0)
            continue;
        auto m = metrics(c);
        for (double v : {m.accuracy, m.precision, m.recall, m.f1}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        CHECK(m.accuracy == static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()));
    }
}

TEST_CASE("weighted average reproduces the published test averages") {
    const std::vector<double> w{13825, 1965, 9680};
    const std::vector<Metrics> rows{{0.91, 0.91, 0.90, 0.915}, {0.87, 0.87, 0.89, 0.875}, {0.81, 0.85, 0.805, 0.805}};
    auto avg = weighted_average(rows, w);
    CHECK(std::abs(avg.accuracy - 0.869) <= 0.001);
    CHECK(std::abs(avg.precision - 0.884) <= 0.001);
    CHECK(std::abs(avg.recall - 0.863) <= 0.001);
    CHECK(std::abs(avg.f1 - 0.870) <= 0.001);
}

TEST_CASE("weighted average properties") {
    const std::vector<Metrics> one{{0.3, 0.4, 0.5, 0.6}};
    const std::vector<double> w1{17};
    CHECK(weighted_average(one, w1) == one[0]);
    const std::vector<Metrics> two{{0.2, 0.4, 0.6, 0.8}, {0.4, 0.6, 0.8, 1.0}};
    const std::vector<double> eq{5, 5};
    auto m = weighted_average(two, eq);
    CHECK(m.accuracy == doctest::Approx(0.3));
    CHECK(m.f1 == doctest::Approx(0.9));
    CHECK(mean_metrics(two).precision == doctest::Approx(0.5));
    const std::vector<double> bad{5, 0};
    CHECK_THROWS(weighted_average(two, bad));
    Rng rng(2);
    for (int t = 0; t < 200; ++t) {
        std::vector<Metrics> parts(1 + rng.below(6));
        std::vector<double> w(parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) {
            parts[i] = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
            w[i] = 1 + static_cast<double>(rng.below(10000));
        }
        auto a = weighted_average(parts, w);
        auto lo = [&](auto f) {
            double v = 2;
            for (auto& p : parts)
                v = std::min(v, f(p));
            return v;
        };
        auto hi = [&](auto f) {
            double v = -1;
            for (auto& p : parts)
                v = std::max(v, f(p));
            return v;
        };
        auto acc = [](const Metrics& m) { return m.accuracy; };
        auto f1 = [](const Metrics& m) { return m.f1; };
        CHECK(a.accuracy >= lo(acc) - 1e-15);
        CHECK(a.accuracy <= hi(acc) + 1e-15);
        CHECK(a.f1 >= lo(f1) - 1e-15);
        CHECK(a.f1 <= hi(f1) + 1e-15);
    }
}

TEST_CASE("report files") {
    testsupport::TempDir dir("report");
    std::vector<RegionResult> regions(2);
    regions[0].name = "near";
    regions[0].counts = {40, 5, 10, 45};
    regions[1].name = "far";
    regions[1].counts = {10, 10, 5, 25};
    for (auto& r : regions)
        r.scores = metrics(r.counts);
    auto rep = make_report("model-1", regions);
    CHECK(rep.regions[0].pixels == 100);
    CHECK(rep.regions[1].pixels == 50);
    CHECK(rep.weighted.accuracy == doctest::Approx((0.85 * 100 + 0.7 * 50) / 150));
    write_report_json(rep, dir / "a.json");
    write_report_json(make_report("model-1", regions), dir / "b.json");
    CHECK(testsupport::read_bytes(dir / "a.json") == testsupport::read_bytes(dir / "b.json"));
    write_report_csv(rep, dir / "r.csv");
    std::ifstream in(dir / "r.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "region,pixels,tp,fp,fn,tn,accuracy,precision,recall,f1");
    std::getline(in, line);
    CHECK(line.rfind("near,100,40,5,10,45,", 0) == 0);
    std::getline(in, line);
    std::getline(in, line);
    CHECK(line.rfind("weighted_average,150,", 0) == 0);
}

TEST_CASE("permutation importance: constant and unused features score exactly 0") {
    Rng rng(3);
    const std::size_t n = 200, d = 6;
    std::vector<double> x(n * d);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j)
            x[i * d + j] = rng.normal();
        x[i * d + 3] = 1.5;   // constant column
        y[i] = x[i * d] + x[i * d + 1] > 0;
    }
    DataView X{x, n, d};
    ForestParams p;
    p.n_estimators = 3;
    p.max_depth = 2;
    auto model = train_forest(X, y, p, 1);
    std::set<int> used;
    for (const auto& t : model.trees)
        for (const auto& node : t.nodes)
            if (!node.is_leaf())
                used.insert(node.feature);
    const std::vector<std::string> names{"f0", "f1", "f2", "f3", "f4", "f5"};
    auto pred = [&](const DataView& v) { return predict_forest(model, v).labels; };
    auto a = permutation_importance(pred, X, y, names, 7, 11, 1);
    auto b = permutation_importance(pred, X, y, names, 7, 11, 4);
    REQUIRE(a.features.size() == d);
    int unused = 0;
    for (std::size_t k = 0; k < d; ++k) {
        const auto& f = a.features[k];
        CHECK(f.mean == b.features[k].mean);
        CHECK(f.std == b.features[k].std);
        CHECK(f.column == b.features[k].column);
        CHECK(f.std >= 0.0);
        CHECK(f.n_repeats == 7);
        CHECK(f.name == names[f.column]);
        if (f.column == 3 || !used.count(static_cast<int>(f.column))) {
            CHECK(f.mean == 0.0);
            CHECK(f.std == 0.0);
            ++unused;
        }
        if (k > 0)
            CHECK(a.features[k - 1].mean >= f.mean);
    }
    CHECK(unused >= 2);
    CHECK(a.baseline_accuracy == metrics(confusion(y, pred(X))).accuracy);
    for (const auto& h : a.headline(0.001))
        CHECK(h.mean > 0.001);
}

TEST_CASE("permutation importance: the informative feature ranks first") {
    int first = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto r = oracle::two_feature_importance(seed);
        first += r.informative_first;
        CHECK(std::abs(r.imp1) < 0.05);
        CHECK(r.imp0 > 0.2);
    }
    CHECK(first >= 19);
}

TEST_CASE("importance files") {
    testsupport::TempDir dir("imp");
    ImportanceTable t;
    t.baseline_accuracy = 0.9;
    t.features = {{"b", 1, 0.2, 0.01, 3}, {"a", 0, 0.0005, 0.0, 3}};
    write_importance_csv(t, dir / "i.csv");
    std::ifstream in(dir / "i.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "feature_name,mean,std,rank");
    std::getline(in, line);
    CHECK(line.rfind("b,", 0) == 0);
    CHECK(line.substr(line.rfind(',') + 1) == "1");
    write_importance_json(t, 0.001, dir / "i.json");
    auto j = nlohmann::json::parse(std::ifstream(dir / "i.json"));
    CHECK(j.dump().find("\"b\"") != std::string::npos);
    CHECK(t.headline(0.001).size() == 1);
}
