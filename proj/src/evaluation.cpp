#include "cropmap/evaluation.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"
#include "cropmap/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace cropmap {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

ConfusionCounts confusion(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> predicted) {
    if (truth.size() != predicted.size())
        throw InvariantError("truth and prediction lengths differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool t = truth[i] != 0, p = predicted[i] != 0;
        if (t && p)
            ++c.tp;
        else if (!t && p)
            ++c.fp;
        else if (t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

namespace {
double ratio(double a, double b) { return b == 0.0 ? 0.0 : a / b; }
} // namespace

Metrics metrics(const ConfusionCounts& c) {
    Metrics m;
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
    m.accuracy = ratio(tp + tn, tp + fp + fn + tn);
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
    return m;
}

Metrics weighted_average(std::span<const Metrics> parts, std::span<const double> weights) {
    if (parts.size() != weights.size())
        throw InvariantError("metrics and weights differ in length");
    if (parts.empty())
        throw DomainError("weighted average of nothing");
    double wsum = 0.0;
    Metrics out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const double w = weights[i];
        if (!(w > 0.0))
            throw DomainError("weights must be positive");
        wsum += w;
        out.accuracy += w * parts[i].accuracy;
        out.precision += w * parts[i].precision;
        out.recall += w * parts[i].recall;
        out.f1 += w * parts[i].f1;
    }
    out.accuracy /= wsum;
    out.precision /= wsum;
    out.recall /= wsum;
    out.f1 /= wsum;
    return out;
}

Metrics mean_metrics(std::span<const Metrics> parts) {
    std::vector<double> w(parts.size(), 1.0);
    return weighted_average(parts, w);
}

EvaluationReport make_report(std::string model_id, std::vector<RegionResult> regions) {
    EvaluationReport r;
    r.model_id = std::move(model_id);
    std::vector<Metrics> parts;
    std::vector<double> w;
    for (auto& reg : regions) {
        reg.pixels = reg.counts.total();
        reg.scores = metrics(reg.counts);
        if (reg.pixels > 0) {
            parts.push_back(reg.scores);
            w.push_back(static_cast<double>(reg.pixels));
        }
    }
    if (!parts.empty())
        r.weighted = weighted_average(parts, w);
    r.regions = std::move(regions);
    return r;
}

namespace {

nlohmann::ordered_json metrics_json(const Metrics& m) {
    return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void write_report_json(const EvaluationReport& r, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["model_id"] = r.model_id;
    auto regions = nlohmann::ordered_json::array();
    for (const auto& reg : r.regions) {
        nlohmann::ordered_json e;
        e["region"] = reg.name;
        e["pixels"] = reg.pixels;
        e["tp"] = reg.counts.tp;
        e["fp"] = reg.counts.fp;
        e["fn"] = reg.counts.fn;
        e["tn"] = reg.counts.tn;
        e["metrics"] = metrics_json(reg.scores);
        regions.push_back(std::move(e));
    }
    j["regions"] = std::move(regions);
    j["weighted_average"] = metrics_json(r.weighted);
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

void write_report_csv(const EvaluationReport& r, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "region,pixels,tp,fp,fn,tn,accuracy,precision,recall,f1\n";
    for (const auto& reg : r.regions)
        out << reg.name << ',' << reg.pixels << ',' << reg.counts.tp << ',' << reg.counts.fp << ',' << reg.counts.fn
            << ',' << reg.counts.tn << ',' << num(reg.scores.accuracy) << ',' << num(reg.scores.precision) << ','
            << num(reg.scores.recall) << ',' << num(reg.scores.f1) << '\n';
    std::uint64_t total = 0;
    for (const auto& reg : r.regions)
        total += reg.pixels;
    out << "weighted_average," << total << ",,,,," << num(r.weighted.accuracy) << ',' << num(r.weighted.precision)
        << ',' << num(r.weighted.recall) << ',' << num(r.weighted.f1) << '\n';
}

std::vector<FeatureImportance> ImportanceTable::headline(double threshold) const {
    std::vector<FeatureImportance> out;
    for (const auto& f : features)
        if (f.mean > threshold)
            out.push_back(f);
    return out;
}

namespace {

double accuracy_of(std::span<const std::uint8_t> y, const std::vector<std::uint8_t>& pred) {
    if (pred.size() != y.size())
        throw InvariantError("predictor returned the wrong number of labels");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        ok += (pred[i] != 0) == (y[i] != 0);
    return y.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(y.size());
}

} // namespace

ImportanceTable permutation_importance(const Predictor& predict, const DataView& X, std::span<const std::uint8_t> y,
                                       std::span<const std::string> names, int n_repeats, std::uint64_t seed,
                                       unsigned threads) {
    if (X.values.size() != X.rows * X.cols)
        throw InvariantError("data view size does not match rows x cols");
    if (y.size() != X.rows)
        throw SchemaError("label count does not match row count");
    if (!names.empty() && names.size() != X.cols)
        throw SchemaError("feature name count does not match column count");
    if (n_repeats < 1)
        throw ConfigError("n_repeats must be >= 1");

    ImportanceTable t;
    t.baseline_accuracy = accuracy_of(y, predict(X));

    std::vector<std::vector<double>> drops(X.cols, std::vector<double>(static_cast<std::size_t>(n_repeats)));
    const unsigned workers = std::max(1u, threads ? threads : default_threads());
    const std::size_t groups = std::min<std::size_t>(workers, std::max<std::size_t>(1, X.cols));

    // one private copy of X per group of columns; a column is shuffled, scored and restored
    parallel_for(
        groups,
        [&](std::size_t g) {
            const std::size_t j0 = X.cols * g / groups, j1 = X.cols * (g + 1) / groups;
            if (j0 == j1)
                return;
            std::vector<double> buf(X.values.begin(), X.values.end());
            std::vector<double> column(X.rows);
            std::vector<std::size_t> perm(X.rows);
            for (std::size_t j = j0; j < j1; ++j) {
                for (std::size_t i = 0; i < X.rows; ++i)
                    column[i] = X.at(i, j);
                const std::uint64_t fseed = derive_seed(seed, j);
                for (int r = 0; r < n_repeats; ++r) {
                    std::iota(perm.begin(), perm.end(), std::size_t{0});
                    Rng rng(derive_seed(fseed, static_cast<std::uint64_t>(r)));
                    rng.shuffle(std::span<std::size_t>(perm));
                    for (std::size_t i = 0; i < X.rows; ++i)
                        buf[i * X.cols + j] = column[perm[i]];
                    DataView shuffled{buf, X.rows, X.cols};
                    drops[j][static_cast<std::size_t>(r)] = t.baseline_accuracy - accuracy_of(y, predict(shuffled));
                }
                for (std::size_t i = 0; i < X.rows; ++i)
                    buf[i * X.cols + j] = column[i];
            }
        },
        threads);

    t.features.resize(X.cols);
    for (std::size_t j = 0; j < X.cols; ++j) {
        auto& f = t.features[j];
        f.column = j;
        f.name = names.empty() ? "f" + std::to_string(j) : names[j];
        f.n_repeats = n_repeats;
        double mean = 0.0;
        for (double d : drops[j])
            mean += d;
        mean /= n_repeats;
        double var = 0.0;
        for (double d : drops[j])
            var += (d - mean) * (d - mean);
        f.mean = mean;
        f.std = std::sqrt(var / n_repeats);
    }
    std::stable_sort(t.features.begin(), t.features.end(),
                     [](const FeatureImportance& a, const FeatureImportance& b) { return a.mean > b.mean; });
    return t;
}

void write_importance_csv(const ImportanceTable& t, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "feature_name,mean,std,rank\n";
    for (std::size_t i = 0; i < t.features.size(); ++i)
        out << t.features[i].name << ',' << num(t.features[i].mean) << ',' << num(t.features[i].std) << ',' << i + 1
            << '\n';
}

void write_importance_json(const ImportanceTable& t, double threshold, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["baseline_accuracy"] = t.baseline_accuracy;
    j["threshold"] = threshold;
    auto list = [](const std::vector<FeatureImportance>& v) {
        auto a = nlohmann::ordered_json::array();
        for (const auto& f : v)
            a.push_back({{"feature", f.name}, {"mean", f.mean}, {"std", f.std}, {"n_repeats", f.n_repeats}});
        return a;
    };
    j["headline"] = list(t.headline(threshold));
    j["all"] = list(t.features);
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

} // namespace cropmap
