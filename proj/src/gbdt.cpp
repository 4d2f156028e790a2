#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "malsim/gbdt.hpp"

namespace malsim::gbdt {

namespace {

constexpr double kMinHessian = 1e-16;

struct SortedColumn {
    std::vector<std::uint32_t> rows;  // ascending value, ties by row index
    std::vector<double> values;
    bool constant = true;
};

std::vector<SortedColumn> presort(const Matrix& x) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<SortedColumn> cols(d);
    parallel_for(d, [&](std::size_t j) {
        auto& c = cols[j];
        c.rows.resize(n);
        std::iota(c.rows.begin(), c.rows.end(), 0u);
        std::stable_sort(c.rows.begin(), c.rows.end(),
                         [&](std::uint32_t a, std::uint32_t b) { return x(a, j) < x(b, j); });
        c.values.resize(n);
        for (std::size_t k = 0; k < n; ++k) c.values[k] = x(c.rows[k], j);
        c.constant = n == 0 || c.values.front() == c.values.back();
    });
    return cols;
}

struct Candidate {
    double gain = 0.0;
    int feature = -1;
    double threshold = 0.0;
};

double split_threshold(double lo, double hi) {
    double t = lo + (hi - lo) / 2.0;
    if (!(lo < t)) t = hi;
    return t;
}

double score(double g, double h, double lambda) { return g * g / (h + lambda); }

// Grows one tree level by level. Leaf weight = -G/(H+lambda) over routed rows.
Tree grow_tree(const Matrix& x, const std::vector<SortedColumn>& cols, std::span<const double> g,
               std::span<const double> h, const Hyperparams& p) {
    const std::size_t n = x.rows();
    struct Building {
        int feature = -1;
        double threshold = 0.0;
        int left = -1, right = -1;
        int depth = 0;
        double G = 0.0, H = 0.0;
    };
    std::vector<Building> nodes(1);
    std::vector<int> node_of(n, 0);

    // Direct row-order sums for the given nodes only.
    auto accumulate_stats = [&](const std::vector<int>& node_ids) {
        std::vector<char> target(nodes.size(), 0);
        for (int id : node_ids) {
            auto& nd = nodes[static_cast<std::size_t>(id)];
            nd.G = nd.H = 0.0;
            target[static_cast<std::size_t>(id)] = 1;
        }
        for (std::size_t r = 0; r < n; ++r) {
            const auto id = static_cast<std::size_t>(node_of[r]);
            if (!target[id]) continue;
            nodes[id].G += g[r];
            nodes[id].H += h[r];
        }
    };

    std::vector<int> frontier{0};
    accumulate_stats(frontier);
    for (int depth = 0; depth < p.max_depth && !frontier.empty(); ++depth) {
        std::vector<int> slot_of(nodes.size(), -1);
        for (std::size_t s = 0; s < frontier.size(); ++s) slot_of[static_cast<std::size_t>(frontier[s])] = static_cast<int>(s);

        const std::size_t n_slots = frontier.size();
        std::vector<std::vector<Candidate>> per_feature(cols.size());
        parallel_for(cols.size(), [&](std::size_t j) {
            const auto& col = cols[j];
            if (col.constant) return;
            std::vector<Candidate> best(n_slots);
            std::vector<double> gl(n_slots, 0.0), hl(n_slots, 0.0), last(n_slots, 0.0);
            std::vector<std::size_t> seen(n_slots, 0);
            for (std::size_t k = 0; k < n; ++k) {
                const std::uint32_t r = col.rows[k];
                const int slot = slot_of[static_cast<std::size_t>(node_of[r])];
                if (slot < 0) continue;
                const auto s = static_cast<std::size_t>(slot);
                const double v = col.values[k];
                if (seen[s] > 0 && v != last[s]) {
                    const auto& nd = nodes[static_cast<std::size_t>(frontier[s])];
                    const double gr = nd.G - gl[s], hr = nd.H - hl[s];
                    if (hl[s] >= p.min_child_weight && hr >= p.min_child_weight) {
                        const double gain = 0.5 * (score(gl[s], hl[s], p.lambda) + score(gr, hr, p.lambda) -
                                                   score(nd.G, nd.H, p.lambda)) -
                                            p.gamma;
                        if (gain > best[s].gain) best[s] = {gain, static_cast<int>(j), split_threshold(last[s], v)};
                    }
                }
                gl[s] += g[r];
                hl[s] += h[r];
                last[s] = v;
                ++seen[s];
            }
            per_feature[j] = std::move(best);
        });

        std::vector<Candidate> best(n_slots);
        for (const auto& cands : per_feature) {
            if (cands.empty()) continue;
            for (std::size_t s = 0; s < n_slots; ++s)
                if (cands[s].gain > best[s].gain) best[s] = cands[s];
        }

        std::vector<int> next;
        for (std::size_t s = 0; s < n_slots; ++s) {
            if (best[s].feature < 0) continue;
            const int id = frontier[s];
            const int left = static_cast<int>(nodes.size());
            nodes.push_back({.depth = depth + 1});
            nodes.push_back({.depth = depth + 1});
            auto& nd = nodes[static_cast<std::size_t>(id)];
            nd.feature = best[s].feature;
            nd.threshold = best[s].threshold;
            nd.left = left;
            nd.right = left + 1;
            next.push_back(left);
            next.push_back(left + 1);
        }
        if (next.empty()) break;
        for (std::size_t r = 0; r < n; ++r) {
            const auto& nd = nodes[static_cast<std::size_t>(node_of[r])];
            if (nd.feature < 0) continue;
            node_of[r] = x(r, static_cast<std::size_t>(nd.feature)) < nd.threshold ? nd.left : nd.right;
        }
        accumulate_stats(next);
        frontier = std::move(next);
    }

    Tree tree;
    tree.nodes.resize(nodes.size());
    int next_leaf = 0;
    // Left-first depth-first numbering keeps leaf ids dense and deterministic.
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        const auto& b = nodes[static_cast<std::size_t>(id)];
        auto& out = tree.nodes[static_cast<std::size_t>(id)];
        if (b.feature >= 0) {
            out.feature = b.feature;
            out.threshold = b.threshold;
            out.left = b.left;
            out.right = b.right;
            stack.push_back(b.right);
            stack.push_back(b.left);
        } else {
            out.leaf_id = next_leaf++;
            out.weight = -b.G / (b.H + p.lambda);
        }
    }
    tree.n_leaves = next_leaf;
    return tree;
}

void check_inputs(const Matrix& x, std::span<const int> labels, const TrainOptions& o) {
    if (o.params.rounds <= 0) throw Error(ErrorCode::config, "rounds must be positive");
    if (o.params.max_depth < 0) throw Error(ErrorCode::config, "max_depth must be non-negative");
    if (o.params.learning_rate <= 0.0) throw Error(ErrorCode::config, "learning_rate must be positive");
    if (o.params.lambda < 0.0) throw Error(ErrorCode::config, "lambda must be non-negative");
    if (labels.size() != x.rows())
        throw Error(ErrorCode::dimension_mismatch, "label count does not match row count");
    if (x.rows() == 0) throw Error(ErrorCode::training, "empty training matrix");
    for (double v : x.data())
        if (!std::isfinite(v)) throw Error(ErrorCode::training, "non-finite feature value in training matrix");
    const int k = o.objective == Objective::softmax ? o.num_classes : 2;
    if (o.objective == Objective::softmax && k < 2) throw Error(ErrorCode::config, "softmax needs at least 2 classes");
    for (int y : labels)
        if (y < 0 || y >= k) throw Error(ErrorCode::config, "label " + std::to_string(y) + " outside objective range");
}

double sigmoid(double m) {
    if (m >= 0) return 1.0 / (1.0 + std::exp(-m));
    const double e = std::exp(m);
    return e / (1.0 + e);
}

void softmax_inplace(std::span<double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

double logistic_loss(double margin, int y) {
    // log(1 + e^m) - y m, evaluated stably
    return std::max(margin, 0.0) + std::log1p(std::exp(-std::abs(margin))) - (y == 1 ? margin : 0.0);
}

double softmax_loss(std::span<const double> margins, int y) {
    const double mx = *std::max_element(margins.begin(), margins.end());
    double sum = 0.0;
    for (double m : margins) sum += std::exp(m - mx);
    return mx + std::log(sum) - margins[static_cast<std::size_t>(y)];
}

double loss_of_margins(Objective obj, int k, const std::vector<double>& margins, std::span<const int> labels) {
    CompensatedSum total;
    const std::size_t n = labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (obj == Objective::logistic)
            total.add(logistic_loss(margins[i], labels[i]));
        else
            total.add(softmax_loss({margins.data() + i * static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, labels[i]));
    }
    return total.value() / static_cast<double>(n);
}

}  // namespace

const TreeNode& Tree::leaf_for(std::span<const double> x) const {
    std::size_t id = 0;
    while (!nodes[id].is_leaf()) {
        const auto& nd = nodes[id];
        id = static_cast<std::size_t>(x[static_cast<std::size_t>(nd.feature)] < nd.threshold ? nd.left : nd.right);
    }
    return nodes[id];
}

GbdtModel train_gbdt(const Matrix& x, std::span<const int> labels, const TrainOptions& options) {
    check_inputs(x, labels, options);
    GbdtModel model;
    model.objective = options.objective;
    model.num_classes = options.objective == Objective::softmax ? options.num_classes : 2;
    model.params = options.params;
    model.num_features = x.cols();

    const auto cols = presort(x);
    const std::size_t n = x.rows();
    const int tpr = model.trees_per_round();
    const auto k = static_cast<std::size_t>(tpr);
    const auto& p = options.params;

    std::vector<double> margins(n * k, p.base_score);
    std::vector<double> g(n), h(n), prob(n * k);
    if (options.on_round) options.on_round(0, loss_of_margins(model.objective, tpr, margins, labels));

    model.trees.reserve(static_cast<std::size_t>(p.rounds) * k);
    for (int round = 0; round < p.rounds; ++round) {
        if (model.objective == Objective::logistic) {
            for (std::size_t i = 0; i < n; ++i) prob[i] = sigmoid(margins[i]);
        } else {
            prob = margins;
            for (std::size_t i = 0; i < n; ++i) softmax_inplace({prob.data() + i * k, k});
        }
        std::vector<Tree> round_trees;
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                const double pi = prob[i * k + c];
                const double yi = model.objective == Objective::logistic
                                      ? static_cast<double>(labels[i])
                                      : (static_cast<std::size_t>(labels[i]) == c ? 1.0 : 0.0);
                g[i] = pi - yi;
                h[i] = std::max(pi * (1.0 - pi), kMinHessian);
            }
            round_trees.push_back(grow_tree(x, cols, g, h, p));
        }
        for (std::size_t c = 0; c < k; ++c) {
            const Tree& t = round_trees[c];
            for (std::size_t i = 0; i < n; ++i) margins[i * k + c] += p.learning_rate * t.leaf_for(x.row(i)).weight;
            model.trees.push_back(std::move(round_trees[c]));
        }
        if (options.on_round) options.on_round(round + 1, loss_of_margins(model.objective, tpr, margins, labels));
    }
    return model;
}

namespace {
void check_dim(const GbdtModel& model, std::span<const double> x) {
    if (x.size() != model.num_features)
        throw Error(ErrorCode::dimension_mismatch, "model expects " + std::to_string(model.num_features) +
                                                       " features, got " + std::to_string(x.size()));
}
int rounds_used(const GbdtModel& model, std::optional<int> rounds) {
    const int total = model.rounds();
    if (!rounds) return total;
    return std::clamp(*rounds, 0, total);
}
}  // namespace

std::vector<double> predict_margin(const GbdtModel& model, std::span<const double> x, std::optional<int> rounds) {
    check_dim(model, x);
    const int tpr = model.trees_per_round();
    std::vector<double> m(static_cast<std::size_t>(tpr), model.params.base_score);
    const int used = rounds_used(model, rounds);
    for (int r = 0; r < used; ++r)
        for (int c = 0; c < tpr; ++c)
            m[static_cast<std::size_t>(c)] +=
                model.params.learning_rate *
                model.trees[static_cast<std::size_t>(r * tpr + c)].leaf_for(x).weight;
    return m;
}

std::vector<double> predict_proba(const GbdtModel& model, std::span<const double> x, std::optional<int> rounds) {
    auto m = predict_margin(model, x, rounds);
    if (model.objective == Objective::logistic) return {sigmoid(m[0])};
    softmax_inplace(m);
    return m;
}

int predict_class(const GbdtModel& model, std::span<const double> x, std::optional<int> rounds) {
    auto p = predict_proba(model, x, rounds);
    if (model.objective == Objective::logistic) return p[0] >= 0.5 ? 1 : 0;
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double mean_loss(const GbdtModel& model, const Matrix& x, std::span<const int> labels, std::optional<int> rounds) {
    std::vector<double> margins;
    margins.reserve(x.rows() * static_cast<std::size_t>(model.trees_per_round()));
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto m = predict_margin(model, x.row(i), rounds);
        margins.insert(margins.end(), m.begin(), m.end());
    }
    return loss_of_margins(model.objective, model.trees_per_round(), margins, labels);
}

LeafIndexVector leaf_embedding(const GbdtModel& model, std::span<const double> x, LeafScope scope, int class_index) {
    check_dim(model, x);
    LeafIndexVector out;
    const int tpr = model.trees_per_round();
    if (scope == LeafScope::all_trees || tpr == 1) {
        out.reserve(model.trees.size());
        for (const auto& t : model.trees) out.push_back(t.leaf_for(x).leaf_id);
        return out;
    }
    if (class_index < 0 || class_index >= tpr) throw Error(ErrorCode::config, "class index outside model classes");
    for (int r = 0; r < model.rounds(); ++r)
        out.push_back(model.trees[static_cast<std::size_t>(r * tpr + class_index)].leaf_for(x).leaf_id);
    return out;
}

std::vector<double> margin_from_leaves(const GbdtModel& model, const LeafIndexVector& leaves) {
    if (leaves.size() != model.trees.size())
        throw Error(ErrorCode::dimension_mismatch, "leaf vector length differs from tree count");
    const int tpr = model.trees_per_round();
    std::vector<double> m(static_cast<std::size_t>(tpr), model.params.base_score);
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
        const auto& tree = model.trees[t];
        double w = 0.0;
        bool found = false;
        for (const auto& nd : tree.nodes)
            if (nd.is_leaf() && nd.leaf_id == leaves[t]) {
                w = nd.weight;
                found = true;
                break;
            }
        if (!found) throw Error(ErrorCode::config, "leaf id outside tree " + std::to_string(t));
        m[t % static_cast<std::size_t>(tpr)] += model.params.learning_rate * w;
    }
    return m;
}

std::vector<std::vector<std::size_t>> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
    if (folds < 2) throw Error(ErrorCode::config, "cross-validation needs at least 2 folds");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(folds));
    Rng rng(seed);
    for (auto& [cls, rows] : members) {
        if (rows.size() < static_cast<std::size_t>(folds))
            throw Error(ErrorCode::fold_construction, "class " + std::to_string(cls) + " has " +
                                                          std::to_string(rows.size()) + " rows, fewer than " +
                                                          std::to_string(folds) + " folds");
        rng.shuffle(rows);
        for (std::size_t k = 0; k < rows.size(); ++k) out[k % static_cast<std::size_t>(folds)].push_back(rows[k]);
    }
    for (auto& f : out) std::sort(f.begin(), f.end());
    return out;
}

GridResult grid_search_cv(const Matrix& x, std::span<const int> labels, const TrainOptions& base, const GridSpec& grid,
                          int folds, std::uint64_t seed) {
    if (grid.max_depth.empty() || grid.learning_rate.empty() || grid.rounds.empty())
        throw Error(ErrorCode::config, "grid must be non-empty");
    const auto fold_rows = stratified_folds(labels, folds, seed);
    const int max_rounds = *std::max_element(grid.rounds.begin(), grid.rounds.end());

    GridResult result;
    for (int depth : grid.max_depth) {
        for (double eta : grid.learning_rate) {
            std::vector<double> acc_sum(grid.rounds.size(), 0.0);
            for (const auto& held : fold_rows) {
                std::vector<char> is_held(labels.size(), 0);
                for (auto r : held) is_held[r] = 1;
                std::vector<std::size_t> train_rows;
                for (std::size_t i = 0; i < labels.size(); ++i)
                    if (!is_held[i]) train_rows.push_back(i);
                std::vector<int> train_labels;
                for (auto r : train_rows) train_labels.push_back(labels[r]);

                TrainOptions o = base;
                o.on_round = nullptr;
                o.params.max_depth = depth;
                o.params.learning_rate = eta;
                o.params.rounds = max_rounds;
                const auto model = train_gbdt(x.select_rows(train_rows), train_labels, o);
                for (std::size_t ri = 0; ri < grid.rounds.size(); ++ri) {
                    std::size_t correct = 0;
                    for (auto r : held)
                        if (predict_class(model, x.row(r), grid.rounds[ri]) == labels[r]) ++correct;
                    acc_sum[ri] += static_cast<double>(correct) / static_cast<double>(held.size());
                }
            }
            for (std::size_t ri = 0; ri < grid.rounds.size(); ++ri)
                result.entries.push_back({depth, eta, grid.rounds[ri], acc_sum[ri] / static_cast<double>(folds)});
        }
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < result.entries.size(); ++i) {
        const auto& a = result.entries[i];
        const auto& b = result.entries[best];
        if (a.mean_accuracy > b.mean_accuracy ||
            (a.mean_accuracy == b.mean_accuracy &&
             (a.max_depth < b.max_depth || (a.max_depth == b.max_depth && a.rounds < b.rounds))))
            best = i;
    }
    result.best = base.params;
    result.best.max_depth = result.entries[best].max_depth;
    result.best.learning_rate = result.entries[best].learning_rate;
    result.best.rounds = result.entries[best].rounds;
    result.best_accuracy = result.entries[best].mean_accuracy;
    return result;
}

}  // namespace malsim::gbdt
