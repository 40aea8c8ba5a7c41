#pragma once

#include "cropmap/evaluation.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cropmap {

// ------------------------------------------------------------------ trees

enum class Criterion { gini, entropy };

Criterion parse_criterion(std::string_view s);
std::string_view criterion_name(Criterion c);

/// gini = 1 - sum p^2; entropy = -sum p log2 p.
double impurity(std::span<const std::size_t> counts, Criterion criterion);

/// Minimum impurity decrease for a split to count as gainful.
inline constexpr double kMinGain = 1e-12;

struct Split {
    std::size_t feature = 0;
    double threshold = 0.0;   // x <= threshold goes left
    double gain = 0.0;
};

/// Best split of `rows` (duplicates allowed) over `candidate_features`: thresholds are
/// midpoints between consecutive distinct values; ties go to the lower feature, then
/// the lower threshold. nullopt if no split gains more than kMinGain.
std::optional<Split> best_split(const DataView& X, std::span<const std::uint8_t> y, std::span<const std::size_t> rows,
                                std::span<const std::size_t> candidate_features, Criterion criterion);

struct TreeNode {
    std::int32_t feature = -1;     // -1 for leaves
    double threshold = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint8_t cls = 0;
    std::uint32_t n0 = 0;
    std::uint32_t n1 = 0;

    bool is_leaf() const { return feature < 0; }
    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;   // nodes[0] is the root

    std::uint8_t predict(std::span<const double> x) const;
    int depth() const;
    friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct TreeParams {
    Criterion criterion = Criterion::gini;
    int max_depth = 0;               // <= 0: unlimited
    std::size_t max_features = 0;    // 0: all features
};

/// Grows one tree on `rows` (a bootstrap sample may repeat rows).
DecisionTree grow_tree(const DataView& X, std::span<const std::uint8_t> y, std::span<const std::size_t> rows,
                       const TreeParams& params, std::uint64_t seed);

// ------------------------------------------------------------------ forest

struct ForestParams {
    int n_estimators = 100;
    Criterion criterion = Criterion::gini;
    int max_depth = 0;
    double max_samples = 1.0;        // bootstrap fraction in (0, 1]
    std::size_t max_features = 0;    // 0: floor(sqrt(D))
    bool bootstrap = true;

    friend bool operator==(const ForestParams&, const ForestParams&) = default;
};

struct ForestModel {
    ForestParams params;
    std::uint64_t seed = 0;
    std::size_t n_features = 0;
    std::vector<std::string> feature_names;
    std::vector<DecisionTree> trees;
    bool degenerate = false;         // trained on a single class

    friend bool operator==(const ForestModel&, const ForestModel&) = default;
};

/// Tree t uses derive_seed(seed, t) for its bootstrap and feature draws, so the
/// model does not depend on the worker count.
ForestModel train_forest(const DataView& X, std::span<const std::uint8_t> y, const ForestParams& params,
                         std::uint64_t seed, unsigned threads = 0);

struct Prediction {
    std::vector<std::uint8_t> labels;
    std::vector<double> score;       // forest: cropland vote fraction; svm: decision value
};

/// Majority vote; exact ties go to class 0. Throws SchemaError on a column mismatch.
Prediction predict_forest(const ForestModel& model, const DataView& X, unsigned threads = 0);

// ------------------------------------------------------------------ svm

enum class Kernel { poly, rbf };

Kernel parse_kernel(std::string_view s);
std::string_view kernel_name(Kernel k);

struct SvmParams {
    double C = 1.0;
    Kernel kernel = Kernel::rbf;
    double gamma = 0.0;              // 0: "scale" = 1 / (D * var(X))
    int degree = 3;
    double coef0 = 0.0;
    double tolerance = 1e-3;
    std::size_t max_iter = 0;        // 0: max(10^7, 100 N)
    std::size_t cache_mb = 256;

    friend bool operator==(const SvmParams&, const SvmParams&) = default;
};

struct SvmModel {
    SvmParams params;
    double gamma = 0.0;              // resolved
    std::size_t n_features = 0;
    std::vector<std::string> feature_names;
    std::vector<double> support_vectors;   // n_sv x n_features, row-major
    std::vector<double> alpha_y;
    double b = 0.0;

    std::size_t support_count() const { return alpha_y.size(); }
    friend bool operator==(const SvmModel&, const SvmModel&) = default;
};

/// Full dual solution, for diagnostics and tests.
struct SvmSolution {
    std::vector<double> alpha;       // one per training row
    double b = 0.0;
    std::size_t iterations = 0;
    double max_violation = 0.0;      // m(alpha) - M(alpha) at exit
    double dual_objective = 0.0;     // sum alpha - 1/2 alpha' Q alpha
};

/// 1 / (D * population variance of all entries). ConfigError when the variance is 0.
double gamma_scale(const DataView& X);

double kernel_value(Kernel kernel, double gamma, int degree, double coef0, std::span<const double> a,
                    std::span<const double> b);

/// Soft-margin C-SVC dual solved by SMO with second-order working-set selection.
/// Labels 1 -> +1, 0 -> -1. Throws ConvergenceError when max_iter is exhausted.
SvmModel train_svm(const DataView& X, std::span<const std::uint8_t> y, const SvmParams& params,
                   SvmSolution* solution = nullptr);

double svm_decision(const SvmModel& model, std::span<const double> x);
/// Class 1 where the decision value is > 0.
Prediction predict_svm(const SvmModel& model, const DataView& X, unsigned threads = 0);

// ------------------------------------------------------------------ models & grid search

enum class ModelKind { rf, svm };

ModelKind parse_model_kind(std::string_view s);
std::string_view model_kind_name(ModelKind k);

struct ModelParams {
    ModelKind kind = ModelKind::rf;
    ForestParams forest;
    SvmParams svm;

    /// "criterion=entropy, max_depth=15, max_samples=0.5, n_estimators=100" style echo.
    std::string describe() const;
    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using Model = std::variant<ForestModel, SvmModel>;

Model train_model(const ModelParams& params, const DataView& X, std::span<const std::uint8_t> y, std::uint64_t seed,
                  unsigned threads = 0);
Prediction predict(const Model& model, const DataView& X, unsigned threads = 0);
void set_feature_names(Model& model, std::vector<std::string> names);
const std::vector<std::string>& feature_names(const Model& model);

/// Forest: {"kind":"rf", params, seed, feature_names, trees: [[{f,t,l,r} | {c,n0,n1}]]}.
/// SVM: {"kind":"svm", params, feature_names, sv, alpha_y, b}.
nlohmann::ordered_json model_to_json(const Model& model);
Model model_from_json(const nlohmann::json& j);
void write_model(const Model& model, const std::filesystem::path& path);
Model read_model(const std::filesystem::path& path);

/// Candidate values per hyper-parameter. Enumeration is lexicographic with the
/// first listed parameter outermost (rf: n_estimators, criterion, max_depth,
/// max_samples; svm: C, kernel, gamma).
struct HyperParamGrid {
    ModelKind kind = ModelKind::rf;
    std::vector<int> n_estimators{100};
    std::vector<Criterion> criterion{Criterion::gini};
    std::vector<int> max_depth{0};
    std::vector<double> max_samples{1.0};
    std::vector<double> C{1.0};
    std::vector<Kernel> kernel{Kernel::rbf};
    std::vector<double> gamma{0.0};
    ForestParams forest_base;
    SvmParams svm_base;

    static HyperParamGrid forest_search_space();   // 3 x 2 x 3 x 3
    static HyperParamGrid svm_search_space();      // 4 x 2 x 1
    std::vector<ModelParams> enumerate() const;
};

struct CvFoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

struct GridRow {
    ModelParams params;
    std::vector<Metrics> per_fold;
    Metrics mean;
    bool ok = true;
    std::string error;
};

struct GridSearchResult {
    std::vector<GridRow> rows;
    std::size_t best = 0;
    const GridRow& best_row() const { return rows[best]; }
};

/// Trains every combination on each split's training rows and scores the
/// validation rows. Best = highest mean accuracy, ties -> first in enumeration.
/// A failing cell disqualifies its combination. ConfigError if all fail.
GridSearchResult grid_search(const DataView& X, std::span<const std::uint8_t> y, std::span<const CvFoldSplit> splits,
                             const HyperParamGrid& grid, std::uint64_t seed, unsigned threads = 0);

void write_grid_csv(const GridSearchResult& result, const std::filesystem::path& path);

} // namespace cropmap
