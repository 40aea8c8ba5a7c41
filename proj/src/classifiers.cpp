#include "cropmap/classifiers.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"
#include "cropmap/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <list>
#include <numeric>
#include <sstream>

namespace cropmap {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_labels(std::span<const std::uint8_t> y, std::size_t rows) {
    if (y.size() != rows)
        throw SchemaError("label count " + std::to_string(y.size()) + " != row count " + std::to_string(rows));
    for (auto v : y)
        if (v > 1)
            throw SchemaError("labels must be 0 or 1");
}

void check_view(const DataView& X) {
    if (X.values.size() != X.rows * X.cols)
        throw InvariantError("data view size does not match rows x cols");
}

std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

} // namespace

// ------------------------------------------------------------------ trees

Criterion parse_criterion(std::string_view s) {
    if (s == "gini")
        return Criterion::gini;
    if (s == "entropy")
        return Criterion::entropy;
    throw ConfigError("unknown criterion '" + std::string(s) + "'");
}

std::string_view criterion_name(Criterion c) { return c == Criterion::gini ? "gini" : "entropy"; }

double impurity(std::span<const std::size_t> counts, Criterion criterion) {
    std::size_t total = 0;
    for (auto c : counts)
        total += c;
    if (total == 0)
        return 0.0;
    const double n = static_cast<double>(total);
    double acc = 0.0;
    if (criterion == Criterion::gini) {
        for (auto c : counts) {
            const double p = static_cast<double>(c) / n;
            acc += p * p;
        }
        return 1.0 - acc;
    }
    for (auto c : counts) {
        if (c == 0)
            continue;
        const double p = static_cast<double>(c) / n;
        acc -= p * std::log2(p);
    }
    return acc;
}

namespace {

double impurity2(std::size_t n0, std::size_t n1, Criterion c) {
    const std::size_t counts[2] = {n0, n1};
    return impurity(counts, c);
}

struct SplitScratch {
    std::vector<std::pair<double, std::uint8_t>> pairs;
};

std::optional<Split> best_split_impl(const DataView& X, std::span<const std::uint8_t> y,
                                     std::span<const std::size_t> rows, std::span<const std::size_t> features,
                                     Criterion criterion, SplitScratch& scratch) {
    const std::size_t n = rows.size();
    if (n < 2)
        return std::nullopt;
    std::size_t p1 = 0;
    for (auto r : rows)
        p1 += y[r];
    const std::size_t p0 = n - p1;
    if (p0 == 0 || p1 == 0)
        return std::nullopt;
    const double parent = impurity2(p0, p1, criterion);
    const double nd = static_cast<double>(n);

    std::vector<std::size_t> order(features.begin(), features.end());
    std::sort(order.begin(), order.end());

    std::optional<Split> best;
    auto& pairs = scratch.pairs;
    for (std::size_t f : order) {
        pairs.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            pairs[i] = {X.at(rows[i], f), y[rows[i]]};
        std::sort(pairs.begin(), pairs.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        std::size_t l1 = 0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            l1 += pairs[i].second;
            const double a = pairs[i].first;
            const double b = pairs[i + 1].first;
            if (!(a < b))
                continue;
            const std::size_t nl = i + 1;
            const std::size_t nr = n - nl;
            const std::size_t l0 = nl - l1;
            const double gain = parent - (static_cast<double>(nl) / nd) * impurity2(l0, l1, criterion) -
                                (static_cast<double>(nr) / nd) * impurity2(p0 - l0, p1 - l1, criterion);
            if (gain > kMinGain && (!best || gain > best->gain)) {
                double t = 0.5 * (a + b);
                if (!(t < b))
                    t = a;
                best = Split{f, t, gain};
            }
        }
    }
    return best;
}

} // namespace

std::optional<Split> best_split(const DataView& X, std::span<const std::uint8_t> y, std::span<const std::size_t> rows,
                                std::span<const std::size_t> candidate_features, Criterion criterion) {
    for (auto f : candidate_features)
        if (f >= X.cols)
            throw InvariantError("candidate feature out of range");
    SplitScratch scratch;
    return best_split_impl(X, y, rows, candidate_features, criterion, scratch);
}

std::uint8_t DecisionTree::predict(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
        const TreeNode& n = nodes[i];
        i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return nodes[i].cls;
}

int DecisionTree::depth() const {
    if (nodes.empty())
        return 0;
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    // children always come after their parent
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        best = std::max(best, d[i]);
        if (!nodes[i].is_leaf()) {
            d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
            d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
        }
    }
    return best;
}

namespace {

class TreeBuilder {
public:
    TreeBuilder(const DataView& X, std::span<const std::uint8_t> y, const TreeParams& p, std::uint64_t seed)
        : X_(X), y_(y), p_(p), rng_(seed), perm_(X.cols) {
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        m_ = p.max_features == 0 ? X.cols : std::min(p.max_features, X.cols);
    }

    std::int32_t build(std::vector<std::size_t> rows, int depth) {
        std::uint32_t n1 = 0;
        for (auto r : rows)
            n1 += y_[r];
        const std::uint32_t n0 = static_cast<std::uint32_t>(rows.size()) - n1;
        const auto idx = static_cast<std::int32_t>(tree.nodes.size());
        TreeNode leaf;
        leaf.n0 = n0;
        leaf.n1 = n1;
        leaf.cls = n1 > n0 ? 1 : 0;
        tree.nodes.push_back(leaf);
        if (n0 == 0 || n1 == 0 || rows.size() < 2 || (p_.max_depth > 0 && depth >= p_.max_depth))
            return idx;

        // partial Fisher-Yates for the candidate features
        for (std::size_t i = 0; i < m_; ++i) {
            std::size_t j = i + rng_.below(perm_.size() - i);
            std::swap(perm_[i], perm_[j]);
        }
        std::span<const std::size_t> cand(perm_.data(), m_);
        auto split = best_split_impl(X_, y_, rows, cand, p_.criterion, scratch_);
        if (!split)
            return idx;

        std::vector<std::size_t> left, right;
        for (auto r : rows)
            (X_.at(r, split->feature) <= split->threshold ? left : right).push_back(r);
        rows.clear();
        rows.shrink_to_fit();
        const std::int32_t l = build(std::move(left), depth + 1);
        const std::int32_t r = build(std::move(right), depth + 1);
        TreeNode& node = tree.nodes[static_cast<std::size_t>(idx)];
        node.feature = static_cast<std::int32_t>(split->feature);
        node.threshold = split->threshold;
        node.left = l;
        node.right = r;
        node.n0 = node.n1 = 0;
        node.cls = 0;
        return idx;
    }

    DecisionTree tree;

private:
    const DataView& X_;
    std::span<const std::uint8_t> y_;
    TreeParams p_;
    Rng rng_;
    std::vector<std::size_t> perm_;
    std::size_t m_ = 0;
    SplitScratch scratch_;
};

} // namespace

DecisionTree grow_tree(const DataView& X, std::span<const std::uint8_t> y, std::span<const std::size_t> rows,
                       const TreeParams& params, std::uint64_t seed) {
    check_view(X);
    check_labels(y, X.rows);
    if (rows.empty())
        throw DomainError("cannot grow a tree on zero rows");
    for (auto r : rows)
        if (r >= X.rows)
            throw InvariantError("tree row index out of range");
    TreeBuilder b(X, y, params, seed);
    b.build(std::vector<std::size_t>(rows.begin(), rows.end()), 0);
    return std::move(b.tree);
}

// ------------------------------------------------------------------ forest

ForestModel train_forest(const DataView& X, std::span<const std::uint8_t> y, const ForestParams& params,
                         std::uint64_t seed, unsigned threads) {
    check_view(X);
    check_labels(y, X.rows);
    if (params.n_estimators < 1)
        throw ConfigError("n_estimators must be >= 1");
    if (!(params.max_samples > 0.0 && params.max_samples <= 1.0))
        throw ConfigError("max_samples must lie in (0, 1]");
    if (X.rows == 0 || X.cols == 0)
        throw DomainError("empty training matrix");

    ForestModel m;
    m.params = params;
    m.seed = seed;
    m.n_features = X.cols;
    m.degenerate = std::all_of(y.begin(), y.end(), [&](std::uint8_t v) { return v == y[0]; });

    TreeParams tp;
    tp.criterion = params.criterion;
    tp.max_depth = params.max_depth;
    tp.max_features = params.max_features == 0
                          ? std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(
                                                         static_cast<double>(X.cols)))))
                          : params.max_features;
    const std::size_t n_boot =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(params.max_samples * static_cast<double>(X.rows))));

    m.trees.resize(static_cast<std::size_t>(params.n_estimators));
    parallel_for(
        m.trees.size(),
        [&](std::size_t t) {
            const std::uint64_t s = derive_seed(seed, t);
            std::vector<std::size_t> rows;
            if (params.bootstrap) {
                Rng rng(s);
                rows.resize(n_boot);
                for (auto& r : rows)
                    r = rng.below(X.rows);
            } else {
                rows.resize(X.rows);
                std::iota(rows.begin(), rows.end(), std::size_t{0});
            }
            m.trees[t] = grow_tree(X, y, rows, tp, derive_seed(s, 1));
        },
        threads);
    return m;
}

Prediction predict_forest(const ForestModel& model, const DataView& X, unsigned threads) {
    check_view(X);
    if (X.cols != model.n_features)
        throw SchemaError("model expects " + std::to_string(model.n_features) + " features, got " +
                          std::to_string(X.cols));
    Prediction p;
    p.labels.resize(X.rows);
    p.score.resize(X.rows);
    const std::size_t chunk = 256;
    const std::size_t n_chunks = (X.rows + chunk - 1) / chunk;
    const double n_trees = static_cast<double>(model.trees.size());
    parallel_for(
        n_chunks,
        [&](std::size_t c) {
            const std::size_t end = std::min(X.rows, (c + 1) * chunk);
            for (std::size_t i = c * chunk; i < end; ++i) {
                auto x = X.row(i);
                std::size_t votes = 0;
                for (const auto& t : model.trees)
                    votes += t.predict(x);
                p.labels[i] = 2 * votes > model.trees.size() ? 1 : 0;
                p.score[i] = n_trees > 0 ? static_cast<double>(votes) / n_trees : 0.0;
            }
        },
        threads);
    return p;
}

// ------------------------------------------------------------------ svm

Kernel parse_kernel(std::string_view s) {
    if (s == "poly")
        return Kernel::poly;
    if (s == "rbf")
        return Kernel::rbf;
    throw ConfigError("unknown kernel '" + std::string(s) + "'");
}

std::string_view kernel_name(Kernel k) { return k == Kernel::poly ? "poly" : "rbf"; }

double gamma_scale(const DataView& X) {
    check_view(X);
    if (X.values.empty())
        throw ConfigError("gamma=scale needs a non-empty matrix");
    const double n = static_cast<double>(X.values.size());
    double mean = 0.0;
    for (double v : X.values)
        mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : X.values)
        var += (v - mean) * (v - mean);
    var /= n;
    if (!(var > 0.0))
        throw ConfigError("gamma=scale undefined: feature matrix has zero variance");
    return 1.0 / (static_cast<double>(X.cols) * var);
}

double kernel_value(Kernel kernel, double gamma, int degree, double coef0, std::span<const double> a,
                    std::span<const double> b) {
    if (kernel == Kernel::rbf) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            const double d = a[k] - b[k];
            d2 += d * d;
        }
        return std::exp(-gamma * d2);
    }
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        dot += a[k] * b[k];
    return std::pow(gamma * dot + coef0, degree);
}

namespace {

/// Rows of Q_ij = y_i y_j K(x_i, x_j) with an LRU cache.
class QMatrix {
public:
    QMatrix(const DataView& X, std::span<const double> ys, const SvmParams& p, double gamma)
        : X_(X), y_(ys), p_(p), gamma_(gamma), slot_(X.rows, -1) {
        const std::size_t row_bytes = std::max<std::size_t>(1, X.rows * sizeof(double));
        capacity_ = std::max<std::size_t>(2, p.cache_mb * (std::size_t{1} << 20) / row_bytes);
        capacity_ = std::min(capacity_, X.rows);
        diag_.resize(X.rows);
        for (std::size_t i = 0; i < X.rows; ++i)
            diag_[i] = k(i, i);
    }

    double diag(std::size_t i) const { return diag_[i]; }

    const double* row(std::size_t i) {
        if (slot_[i] >= 0) {
            auto& s = slots_[static_cast<std::size_t>(slot_[i])];
            lru_.splice(lru_.begin(), lru_, s.pos);
            return s.data.data();
        }
        std::size_t si;
        if (slots_.size() < capacity_) {
            si = slots_.size();
            slots_.push_back({});
        } else {
            si = static_cast<std::size_t>(slot_[lru_.back()]);
            slot_[lru_.back()] = -1;
            lru_.pop_back();
        }
        auto& s = slots_[si];
        s.data.resize(X_.rows);
        for (std::size_t j = 0; j < X_.rows; ++j)
            s.data[j] = y_[i] * y_[j] * k(i, j);
        lru_.push_front(i);
        s.pos = lru_.begin();
        slot_[i] = static_cast<std::ptrdiff_t>(si);
        return s.data.data();
    }

private:
    double k(std::size_t i, std::size_t j) const {
        return kernel_value(p_.kernel, gamma_, p_.degree, p_.coef0, X_.row(i), X_.row(j));
    }

    struct Slot {
        std::vector<double> data;
        std::list<std::size_t>::iterator pos;
    };

    const DataView& X_;
    std::span<const double> y_;
    SvmParams p_;
    double gamma_;
    std::vector<double> diag_;
    std::vector<std::ptrdiff_t> slot_;
    std::vector<Slot> slots_;
    std::list<std::size_t> lru_;
    std::size_t capacity_ = 2;
};

constexpr double kTau = 1e-12;

} // namespace

SvmModel train_svm(const DataView& X, std::span<const std::uint8_t> y, const SvmParams& params,
                   SvmSolution* solution) {
    check_view(X);
    check_labels(y, X.rows);
    if (X.rows == 0 || X.cols == 0)
        throw DomainError("empty training matrix");
    if (!(params.C > 0.0) || !std::isfinite(params.C))
        throw ConfigError("C must be positive");
    if (!(params.tolerance > 0.0))
        throw ConfigError("tolerance must be positive");
    if (params.gamma < 0.0)
        throw ConfigError("gamma must be >= 0 (0 = scale)");
    for (double v : X.values)
        if (!std::isfinite(v))
            throw DomainError("non-finite value in svm training data");

    SvmModel m;
    m.params = params;
    m.n_features = X.cols;
    m.gamma = params.gamma > 0.0 ? params.gamma : gamma_scale(X);

    const std::size_t n = X.rows;
    const double C = params.C;
    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i)
        ys[i] = y[i] ? 1.0 : -1.0;

    if (std::all_of(y.begin(), y.end(), [&](std::uint8_t v) { return v == y[0]; })) {
        m.b = ys[0];
        if (solution)
            *solution = SvmSolution{std::vector<double>(n, 0.0), m.b, 0, 0.0, 0.0};
        return m;
    }

    QMatrix Q(X, ys, params, m.gamma);
    std::vector<double> alpha(n, 0.0), G(n, -1.0);
    const std::size_t max_iter = params.max_iter ? params.max_iter : std::max<std::size_t>(10'000'000, 100 * n);
    const double eps = params.tolerance;
    std::size_t iter = 0;
    double violation = 0.0;

    for (;;) {
        // second-order working set selection
        double gmax = -std::numeric_limits<double>::infinity();
        std::ptrdiff_t i = -1;
        for (std::size_t t = 0; t < n; ++t) {
            if (ys[t] > 0) {
                if (alpha[t] < C && -G[t] >= gmax) {
                    gmax = -G[t];
                    i = static_cast<std::ptrdiff_t>(t);
                }
            } else if (alpha[t] > 0 && G[t] >= gmax) {
                gmax = G[t];
                i = static_cast<std::ptrdiff_t>(t);
            }
        }
        double gmax2 = -std::numeric_limits<double>::infinity();
        std::ptrdiff_t j = -1;
        if (i >= 0) {
            const auto ii = static_cast<std::size_t>(i);
            const double* Qi = Q.row(ii);
            double obj_min = std::numeric_limits<double>::infinity();
            for (std::size_t t = 0; t < n; ++t) {
                if (ys[t] > 0) {
                    if (!(alpha[t] > 0))
                        continue;
                    const double diff = gmax + G[t];
                    gmax2 = std::max(gmax2, G[t]);
                    if (diff > 0) {
                        double quad = Q.diag(ii) + Q.diag(t) - 2.0 * ys[ii] * Qi[t];
                        const double obj = -(diff * diff) / (quad > 0 ? quad : kTau);
                        if (obj < obj_min) {
                            obj_min = obj;
                            j = static_cast<std::ptrdiff_t>(t);
                        }
                    }
                } else {
                    if (!(alpha[t] < C))
                        continue;
                    const double diff = gmax - G[t];
                    gmax2 = std::max(gmax2, -G[t]);
                    if (diff > 0) {
                        double quad = Q.diag(ii) + Q.diag(t) + 2.0 * ys[ii] * Qi[t];
                        const double obj = -(diff * diff) / (quad > 0 ? quad : kTau);
                        if (obj < obj_min) {
                            obj_min = obj;
                            j = static_cast<std::ptrdiff_t>(t);
                        }
                    }
                }
            }
        }
        violation = gmax + gmax2;
        if (i < 0 || j < 0 || violation < eps)
            break;
        if (iter >= max_iter) {
            std::ostringstream msg;
            msg << "SMO did not converge in " << max_iter << " iterations (KKT violation " << violation
                << ", tolerance " << eps << ")";
            throw ConvergenceError(msg.str());
        }
        ++iter;

        const auto a = static_cast<std::size_t>(i);
        const auto b = static_cast<std::size_t>(j);
        const double* Qa = Q.row(a);
        const double* Qb = Q.row(b);
        const double old_a = alpha[a], old_b = alpha[b];
        double ai = old_a, aj = old_b;
        if (ys[a] != ys[b]) {
            double quad = Q.diag(a) + Q.diag(b) + 2.0 * Qa[b];
            if (quad <= 0)
                quad = kTau;
            const double delta = (-G[a] - G[b]) / quad;
            const double diff = ai - aj;
            ai += delta;
            aj += delta;
            if (diff > 0) {
                if (aj < 0) {
                    aj = 0;
                    ai = diff;
                }
            } else if (ai < 0) {
                ai = 0;
                aj = -diff;
            }
            if (diff > 0) {
                if (ai > C) {
                    ai = C;
                    aj = C - diff;
                }
            } else if (aj > C) {
                aj = C;
                ai = C + diff;
            }
        } else {
            double quad = Q.diag(a) + Q.diag(b) - 2.0 * Qa[b];
            if (quad <= 0)
                quad = kTau;
            const double delta = (G[a] - G[b]) / quad;
            const double sum = ai + aj;
            ai -= delta;
            aj += delta;
            if (sum > C) {
                if (ai > C) {
                    ai = C;
                    aj = sum - C;
                }
            } else if (aj < 0) {
                aj = 0;
                ai = sum;
            }
            if (sum > C) {
                if (aj > C) {
                    aj = C;
                    ai = sum - C;
                }
            } else if (ai < 0) {
                ai = 0;
                aj = sum;
            }
        }
        alpha[a] = ai;
        alpha[b] = aj;
        const double da = ai - old_a, db = aj - old_b;
        for (std::size_t t = 0; t < n; ++t)
            G[t] += Qa[t] * da + Qb[t] * db;
    }

    // bias: mean of y_i G_i over free vectors, else midpoint of the feasible interval
    double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
    std::size_t n_free = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const double yg = ys[t] * G[t];
        if (alpha[t] >= C) {
            if (ys[t] < 0)
                ub = std::min(ub, yg);
            else
                lb = std::max(lb, yg);
        } else if (alpha[t] <= 0) {
            if (ys[t] > 0)
                ub = std::min(ub, yg);
            else
                lb = std::max(lb, yg);
        } else {
            ++n_free;
            sum_free += yg;
        }
    }
    const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);
    m.b = -rho;

    for (std::size_t t = 0; t < n; ++t)
        if (alpha[t] > 0) {
            auto r = X.row(t);
            m.support_vectors.insert(m.support_vectors.end(), r.begin(), r.end());
            m.alpha_y.push_back(alpha[t] * ys[t]);
        }

    if (solution) {
        double sum_a = 0.0, quad = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            sum_a += alpha[t];
            quad += alpha[t] * (G[t] + 1.0);
        }
        solution->alpha = alpha;
        solution->b = m.b;
        solution->iterations = iter;
        solution->max_violation = std::max(violation, 0.0);
        solution->dual_objective = sum_a - 0.5 * quad;
    }
    return m;
}

double svm_decision(const SvmModel& model, std::span<const double> x) {
    double f = model.b;
    const std::size_t d = model.n_features;
    for (std::size_t s = 0; s < model.alpha_y.size(); ++s)
        f += model.alpha_y[s] * kernel_value(model.params.kernel, model.gamma, model.params.degree,
                                             model.params.coef0,
                                             std::span<const double>(model.support_vectors.data() + s * d, d), x);
    return f;
}

Prediction predict_svm(const SvmModel& model, const DataView& X, unsigned threads) {
    check_view(X);
    if (X.cols != model.n_features)
        throw SchemaError("model expects " + std::to_string(model.n_features) + " features, got " +
                          std::to_string(X.cols));
    Prediction p;
    p.labels.resize(X.rows);
    p.score.resize(X.rows);
    parallel_for(
        X.rows,
        [&](std::size_t i) {
            const double f = svm_decision(model, X.row(i));
            p.score[i] = f;
            p.labels[i] = f > 0 ? 1 : 0;
        },
        threads);
    return p;
}

// ------------------------------------------------------------------ models

ModelKind parse_model_kind(std::string_view s) {
    if (s == "rf")
        return ModelKind::rf;
    if (s == "svm")
        return ModelKind::svm;
    throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

std::string_view model_kind_name(ModelKind k) { return k == ModelKind::rf ? "rf" : "svm"; }

std::string ModelParams::describe() const {
    if (kind == ModelKind::rf)
        return "criterion=" + std::string(criterion_name(forest.criterion)) +
               ", max_depth=" + (forest.max_depth > 0 ? std::to_string(forest.max_depth) : std::string("None")) +
               ", max_samples=" + fmt_g(forest.max_samples) + ", n_estimators=" + std::to_string(forest.n_estimators);
    return "C=" + fmt_g(svm.C) + ", gamma=" + (svm.gamma > 0 ? fmt_g(svm.gamma) : std::string("scale")) +
           ", kernel=" + std::string(kernel_name(svm.kernel));
}

Model train_model(const ModelParams& params, const DataView& X, std::span<const std::uint8_t> y, std::uint64_t seed,
                  unsigned threads) {
    if (params.kind == ModelKind::rf)
        return train_forest(X, y, params.forest, seed, threads);
    return train_svm(X, y, params.svm);
}

Prediction predict(const Model& model, const DataView& X, unsigned threads) {
    return std::visit(
        [&](const auto& m) -> Prediction {
            if constexpr (std::is_same_v<std::decay_t<decltype(m)>, ForestModel>)
                return predict_forest(m, X, threads);
            else
                return predict_svm(m, X, threads);
        },
        model);
}

void set_feature_names(Model& model, std::vector<std::string> names) {
    std::visit([&](auto& m) { m.feature_names = std::move(names); }, model);
}

const std::vector<std::string>& feature_names(const Model& model) {
    return std::visit([](const auto& m) -> const std::vector<std::string>& { return m.feature_names; }, model);
}

namespace {

ordered_json forest_params_json(const ForestParams& p) {
    ordered_json j;
    j["n_estimators"] = p.n_estimators;
    j["criterion"] = criterion_name(p.criterion);
    j["max_depth"] = p.max_depth > 0 ? ordered_json(p.max_depth) : ordered_json(nullptr);
    j["max_samples"] = p.max_samples;
    j["max_features"] = p.max_features;
    j["bootstrap"] = p.bootstrap;
    return j;
}

ForestParams forest_params_from(const json& j) {
    ForestParams p;
    p.n_estimators = j.at("n_estimators").get<int>();
    p.criterion = parse_criterion(j.at("criterion").get<std::string>());
    p.max_depth = j.at("max_depth").is_null() ? 0 : j.at("max_depth").get<int>();
    p.max_samples = j.at("max_samples").get<double>();
    p.max_features = j.value("max_features", std::size_t{0});
    p.bootstrap = j.value("bootstrap", true);
    return p;
}

ordered_json svm_params_json(const SvmParams& p) {
    ordered_json j;
    j["C"] = p.C;
    j["kernel"] = kernel_name(p.kernel);
    j["gamma"] = p.gamma > 0 ? ordered_json(p.gamma) : ordered_json("scale");
    j["degree"] = p.degree;
    j["coef0"] = p.coef0;
    j["tolerance"] = p.tolerance;
    j["max_iter"] = p.max_iter;
    j["cache_mb"] = p.cache_mb;
    return j;
}

SvmParams svm_params_from(const json& j) {
    SvmParams p;
    p.C = j.at("C").get<double>();
    p.kernel = parse_kernel(j.at("kernel").get<std::string>());
    const auto& g = j.at("gamma");
    p.gamma = g.is_string() ? (g.get<std::string>() == "scale" ? 0.0 : throw ConfigError("bad gamma")) : g.get<double>();
    p.degree = j.value("degree", 3);
    p.coef0 = j.value("coef0", 0.0);
    p.tolerance = j.value("tolerance", 1e-3);
    p.max_iter = j.value("max_iter", std::size_t{0});
    p.cache_mb = j.value("cache_mb", std::size_t{256});
    return p;
}

} // namespace

ordered_json model_to_json(const Model& model) {
    ordered_json j;
    if (const auto* f = std::get_if<ForestModel>(&model)) {
        j["kind"] = "rf";
        j["params"] = forest_params_json(f->params);
        j["seed"] = f->seed;
        j["n_features"] = f->n_features;
        j["degenerate"] = f->degenerate;
        j["feature_names"] = f->feature_names;
        ordered_json trees = ordered_json::array();
        for (const auto& t : f->trees) {
            ordered_json nodes = ordered_json::array();
            for (const auto& n : t.nodes) {
                ordered_json r;
                if (n.is_leaf()) {
                    r["c"] = n.cls;
                    r["n0"] = n.n0;
                    r["n1"] = n.n1;
                } else {
                    r["f"] = n.feature;
                    r["t"] = n.threshold;
                    r["l"] = n.left;
                    r["r"] = n.right;
                }
                nodes.push_back(std::move(r));
            }
            trees.push_back(std::move(nodes));
        }
        j["trees"] = std::move(trees);
        return j;
    }
    const auto& s = std::get<SvmModel>(model);
    j["kind"] = "svm";
    j["params"] = svm_params_json(s.params);
    j["gamma_value"] = s.gamma;
    j["n_features"] = s.n_features;
    j["reconstructed_defaults"] = {"degree", "coef0", "gamma_scale", "tolerance"};
    j["feature_names"] = s.feature_names;
    ordered_json sv = ordered_json::array();
    for (std::size_t k = 0; k < s.alpha_y.size(); ++k)
        sv.push_back(std::vector<double>(s.support_vectors.begin() + static_cast<std::ptrdiff_t>(k * s.n_features),
                                         s.support_vectors.begin() +
                                             static_cast<std::ptrdiff_t>((k + 1) * s.n_features)));
    j["sv"] = std::move(sv);
    j["alpha_y"] = s.alpha_y;
    j["b"] = s.b;
    return j;
}

Model model_from_json(const json& j) {
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "rf") {
            ForestModel f;
            f.params = forest_params_from(j.at("params"));
            f.seed = j.at("seed").get<std::uint64_t>();
            f.n_features = j.at("n_features").get<std::size_t>();
            f.degenerate = j.value("degenerate", false);
            f.feature_names = j.value("feature_names", std::vector<std::string>{});
            for (const auto& jt : j.at("trees")) {
                DecisionTree t;
                for (const auto& r : jt) {
                    TreeNode n;
                    if (r.contains("f")) {
                        n.feature = r.at("f").get<std::int32_t>();
                        n.threshold = r.at("t").get<double>();
                        n.left = r.at("l").get<std::int32_t>();
                        n.right = r.at("r").get<std::int32_t>();
                    } else {
                        n.cls = r.at("c").get<std::uint8_t>();
                        n.n0 = r.at("n0").get<std::uint32_t>();
                        n.n1 = r.at("n1").get<std::uint32_t>();
                    }
                    t.nodes.push_back(n);
                }
                const auto sz = static_cast<std::int32_t>(t.nodes.size());
                if (sz == 0)
                    throw SchemaError("empty tree in model file");
                for (std::int32_t k = 0; k < sz; ++k) {
                    const auto& n = t.nodes[static_cast<std::size_t>(k)];
                    if (n.is_leaf())
                        continue;
                    if (n.left <= k || n.right <= k || n.left >= sz || n.right >= sz ||
                        static_cast<std::size_t>(n.feature) >= f.n_features)
                        throw SchemaError("malformed tree node in model file");
                }
                f.trees.push_back(std::move(t));
            }
            if (f.trees.size() != static_cast<std::size_t>(f.params.n_estimators))
                throw SchemaError("tree count does not match n_estimators");
            return f;
        }
        if (kind == "svm") {
            SvmModel s;
            s.params = svm_params_from(j.at("params"));
            s.gamma = j.at("gamma_value").get<double>();
            s.n_features = j.at("n_features").get<std::size_t>();
            s.feature_names = j.value("feature_names", std::vector<std::string>{});
            for (const auto& v : j.at("sv")) {
                auto row = v.get<std::vector<double>>();
                if (row.size() != s.n_features)
                    throw SchemaError("support vector length mismatch");
                s.support_vectors.insert(s.support_vectors.end(), row.begin(), row.end());
            }
            s.alpha_y = j.at("alpha_y").get<std::vector<double>>();
            if (s.alpha_y.size() * s.n_features != s.support_vectors.size())
                throw SchemaError("alpha_y length does not match support vectors");
            s.b = j.at("b").get<double>();
            return s;
        }
        throw SchemaError("unknown model kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed model file: ") + e.what());
    }
}

void write_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << model_to_json(model).dump() << '\n';
    if (!out)
        throw IoError("write failed: " + path.string());
}

Model read_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("model file " + path.string() + " is not JSON: " + e.what());
    }
    return model_from_json(j);
}

// ------------------------------------------------------------------ grid search

HyperParamGrid HyperParamGrid::forest_search_space() {
    HyperParamGrid g;
    g.kind = ModelKind::rf;
    g.n_estimators = {100, 300, 500};
    g.criterion = {Criterion::gini, Criterion::entropy};
    g.max_depth = {5, 10, 15};
    g.max_samples = {0.5, 0.8, 1.0};
    return g;
}

HyperParamGrid HyperParamGrid::svm_search_space() {
    HyperParamGrid g;
    g.kind = ModelKind::svm;
    g.C = {0.5, 1.0, 10.0, 100.0};
    g.kernel = {Kernel::poly, Kernel::rbf};
    g.gamma = {0.0};
    return g;
}

std::vector<ModelParams> HyperParamGrid::enumerate() const {
    std::vector<ModelParams> out;
    ModelParams base;
    base.kind = kind;
    base.forest = forest_base;
    base.svm = svm_base;
    if (kind == ModelKind::rf) {
        if (n_estimators.empty() || criterion.empty() || max_depth.empty() || max_samples.empty())
            throw ConfigError("empty hyper-parameter list in rf grid");
        for (int ne : n_estimators)
            for (Criterion c : criterion)
                for (int md : max_depth)
                    for (double ms : max_samples) {
                        ModelParams p = base;
                        p.forest.n_estimators = ne;
                        p.forest.criterion = c;
                        p.forest.max_depth = md;
                        p.forest.max_samples = ms;
                        out.push_back(p);
                    }
    } else {
        if (C.empty() || kernel.empty() || gamma.empty())
            throw ConfigError("empty hyper-parameter list in svm grid");
        for (double c : C)
            for (Kernel k : kernel)
                for (double g : gamma) {
                    ModelParams p = base;
                    p.svm.C = c;
                    p.svm.kernel = k;
                    p.svm.gamma = g;
                    out.push_back(p);
                }
    }
    return out;
}

GridSearchResult grid_search(const DataView& X, std::span<const std::uint8_t> y, std::span<const CvFoldSplit> splits,
                             const HyperParamGrid& grid, std::uint64_t seed, unsigned threads) {
    check_view(X);
    check_labels(y, X.rows);
    if (splits.empty())
        throw ConfigError("grid search needs at least one split");
    const auto combos = grid.enumerate();
    const std::size_t k = splits.size();

    struct Cell {
        Metrics m;
        std::string error;
    };
    std::vector<Cell> cells(combos.size() * k);

    // training matrices per split, shared read-only by all cells
    std::vector<std::vector<double>> tx(k), vx(k);
    std::vector<std::vector<std::uint8_t>> ty(k), vy(k);
    for (std::size_t f = 0; f < k; ++f) {
        for (auto r : splits[f].train) {
            auto row = X.row(r);
            tx[f].insert(tx[f].end(), row.begin(), row.end());
            ty[f].push_back(y[r]);
        }
        for (auto r : splits[f].validation) {
            auto row = X.row(r);
            vx[f].insert(vx[f].end(), row.begin(), row.end());
            vy[f].push_back(y[r]);
        }
    }

    // Cells in parallel, each trained single-threaded: results do not depend on the schedule.
    parallel_for(
        cells.size(),
        [&](std::size_t c) {
            const std::size_t ci = c / k, f = c % k;
            try {
                DataView train{tx[f], ty[f].size(), X.cols};
                DataView val{vx[f], vy[f].size(), X.cols};
                if (train.rows == 0 || val.rows == 0)
                    throw FoldError("split " + std::to_string(f) + " is empty");
                Model m = train_model(combos[ci], train, ty[f], seed, 1);
                Prediction p = predict(m, val, 1);
                cells[c].m = metrics(confusion(vy[f], p.labels));
            } catch (const std::exception& e) {
                cells[c].error = e.what();
            }
        },
        threads);

    GridSearchResult res;
    bool any_ok = false;
    for (std::size_t ci = 0; ci < combos.size(); ++ci) {
        GridRow row;
        row.params = combos[ci];
        for (std::size_t f = 0; f < k; ++f) {
            const Cell& cell = cells[ci * k + f];
            row.per_fold.push_back(cell.m);
            if (!cell.error.empty() && row.ok) {
                row.ok = false;
                row.error = "fold " + std::to_string(f) + ": " + cell.error;
            }
        }
        row.mean = mean_metrics(row.per_fold);
        if (row.ok && (!any_ok || row.mean.accuracy > res.rows[res.best].mean.accuracy)) {
            res.best = ci;
            any_ok = true;
        }
        res.rows.push_back(std::move(row));
    }
    if (!any_ok)
        throw ConfigError("every grid-search combination failed; first error: " + res.rows.front().error);
    return res;
}

void write_grid_csv(const GridSearchResult& result, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    if (result.rows.empty())
        return;
    const bool rf = result.rows.front().params.kind == ModelKind::rf;
    const std::size_t k = result.rows.front().per_fold.size();
    out << (rf ? "n_estimators,criterion,max_depth,max_samples" : "C,kernel,gamma");
    out << ",mean_accuracy,mean_precision,mean_recall,mean_f1";
    for (std::size_t f = 0; f < k; ++f)
        out << ",fold" << f << "_accuracy,fold" << f << "_precision,fold" << f << "_recall,fold" << f << "_f1";
    out << ",status,best\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
        const auto& r = result.rows[i];
        if (rf)
            out << r.params.forest.n_estimators << ',' << criterion_name(r.params.forest.criterion) << ','
                << (r.params.forest.max_depth > 0 ? std::to_string(r.params.forest.max_depth) : "None") << ','
                << fmt_g(r.params.forest.max_samples);
        else
            out << fmt_g(r.params.svm.C) << ',' << kernel_name(r.params.svm.kernel) << ','
                << (r.params.svm.gamma > 0 ? fmt_g(r.params.svm.gamma) : "scale");
        out << ',' << num(r.mean.accuracy) << ',' << num(r.mean.precision) << ',' << num(r.mean.recall) << ','
            << num(r.mean.f1);
        for (const auto& m : r.per_fold)
            out << ',' << num(m.accuracy) << ',' << num(m.precision) << ',' << num(m.recall) << ',' << num(m.f1);
        std::string status = r.ok ? "ok" : "failed: " + r.error;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        out << ',' << status << ',' << (i == result.best ? 1 : 0) << '\n';
    }
    if (!out)
        throw IoError("write failed: " + path.string());
}

} // namespace cropmap
