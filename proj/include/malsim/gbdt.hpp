#pragma once

// Second-order gradient-boosted regression trees (logistic and softmax
// objectives) with exact greedy split search and leaf-index embeddings.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "malsim/common.hpp"

namespace malsim::gbdt {

enum class Objective { logistic, softmax };

struct Hyperparams {
    int max_depth = 6;
    double learning_rate = 0.3;
    int rounds = 100;
    double lambda = 1.0;
    double gamma = 0.0;
    double min_child_weight = 1.0;
    double base_score = 0.0;  // initial margin
};

/// Flat node storage; node 0 is the root. Leaves have feature == -1.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;  // value < threshold goes left
    int left = -1;
    int right = -1;
    int leaf_id = -1;
    double weight = 0.0;

    bool is_leaf() const noexcept { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;
    int n_leaves = 0;

    const TreeNode& leaf_for(std::span<const double> x) const;
};

struct GbdtModel {
    Objective objective = Objective::logistic;
    int num_classes = 2;  // K for softmax
    Hyperparams params;
    std::size_t num_features = 0;
    std::vector<Tree> trees;  // round-major: tree r * trees_per_round() + k

    int trees_per_round() const noexcept { return objective == Objective::softmax ? num_classes : 1; }
    int rounds() const noexcept { return static_cast<int>(trees.size()) / trees_per_round(); }
};

struct TrainOptions {
    Objective objective = Objective::logistic;
    int num_classes = 2;
    Hyperparams params;
    /// Receives the mean training loss before round 0 and after every round.
    std::function<void(int round, double loss)> on_round;
};

/// labels: {0,1} for logistic, 0..K-1 for softmax.
GbdtModel train_gbdt(const Matrix& x, std::span<const int> labels, const TrainOptions& options);

/// Raw margins (one per class for softmax, a single value for logistic),
/// optionally truncated to the first `rounds` boosting rounds.
std::vector<double> predict_margin(const GbdtModel& model, std::span<const double> x,
                                   std::optional<int> rounds = std::nullopt);

std::vector<double> predict_proba(const GbdtModel& model, std::span<const double> x,
                                  std::optional<int> rounds = std::nullopt);

/// Argmax class (logistic: probability >= 0.5).
int predict_class(const GbdtModel& model, std::span<const double> x, std::optional<int> rounds = std::nullopt);

/// Mean training loss (log loss) of margins for given labels.
double mean_loss(const GbdtModel& model, const Matrix& x, std::span<const int> labels,
                 std::optional<int> rounds = std::nullopt);

using LeafIndexVector = std::vector<int>;

enum class LeafScope {
    all_trees,    // rounds x K entries for softmax
    class_trees,  // only the trees of one class: `rounds` entries
};

LeafIndexVector leaf_embedding(const GbdtModel& model, std::span<const double> x,
                               LeafScope scope = LeafScope::all_trees, int class_index = 0);

/// Sum of routed leaf weights times learning rate plus base score, per class.
std::vector<double> margin_from_leaves(const GbdtModel& model, const LeafIndexVector& leaves);

struct GridSpec {
    std::vector<int> max_depth{4, 6, 8};
    std::vector<double> learning_rate{0.05, 0.1, 0.3};
    std::vector<int> rounds{100};
};

struct GridResult {
    Hyperparams best;
    double best_accuracy = 0.0;
    struct Entry {
        int max_depth;
        double learning_rate;
        int rounds;
        double mean_accuracy;
    };
    std::vector<Entry> entries;  // grid order: depth, then learning rate, then rounds
};

/// Stratified k-fold grid search over (max_depth, learning_rate, rounds);
/// highest mean held-out accuracy wins, ties to smaller depth, fewer rounds,
/// then grid order.
GridResult grid_search_cv(const Matrix& x, std::span<const int> labels, const TrainOptions& base,
                          const GridSpec& grid, int folds, std::uint64_t seed);

/// Per-fold held-out row indices; throws fold_construction if a fold lacks a class.
std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed);

nlohmann::json to_json(const GbdtModel& model);
GbdtModel model_from_json(const nlohmann::json& j);
void save_model(const GbdtModel& model, const std::filesystem::path& path);
GbdtModel load_model(const std::filesystem::path& path);

}  // namespace malsim::gbdt
