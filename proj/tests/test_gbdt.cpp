#include <doctest.h>

#include <filesystem>

#include "malsim/gbdt.hpp"
#include "support.hpp"

using namespace malsim;
using namespace malsim::gbdt;
using testsupport::blobs;

namespace {

// Once splits stop paying off the loss plateaus and only summation rounding moves it.
constexpr double kLossNoise = 1e-12;

TrainOptions options(int depth, int rounds, double eta = 0.3) {
    TrainOptions o;
    o.params.max_depth = depth;
    o.params.rounds = rounds;
    o.params.learning_rate = eta;
    return o;
}

double accuracy(const GbdtModel& m, const Matrix& x, std::span<const int> y) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) hit += predict_class(m, x.row(i)) == y[i];
    return static_cast<double>(hit) / static_cast<double>(x.rows());
}

// Two half-planes split by x0 + x1 = 0 with a margin.
Matrix separable(std::size_t n, Rng& rng, std::vector<int>& y) {
    Matrix x;
    y.clear();
    while (x.rows() < n) {
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
        if (std::abs(a + b) < 0.1) continue;
        x.append_row(std::vector<double>{a, b});
        y.push_back(a + b > 0 ? 1 : 0);
    }
    return x;
}

const TreeNode* leaf_by_id(const Tree& t, int id) {
    for (const auto& nd : t.nodes)
        if (nd.is_leaf() && nd.leaf_id == id) return &nd;
    return nullptr;
}

// Recomputes every leaf weight from the samples routed to it at its round.
double max_leaf_weight_error(const GbdtModel& m, const Matrix& x, std::span<const int> y) {
    const int k = m.trees_per_round();
    double worst = 0.0;
    for (int r = 0; r < m.rounds(); ++r) {
        std::vector<std::vector<double>> prob(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) prob[i] = predict_proba(m, x.row(i), r);
        for (int c = 0; c < k; ++c) {
            const Tree& t = m.trees[static_cast<std::size_t>(r * k + c)];
            std::vector<double> G(static_cast<std::size_t>(t.n_leaves), 0.0), H(G.size(), 0.0);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const double p = k == 1 ? prob[i][0] : prob[i][static_cast<std::size_t>(c)];
                const double target = k == 1 ? y[i] : (y[i] == c ? 1.0 : 0.0);
                const auto leaf = static_cast<std::size_t>(t.leaf_for(x.row(i)).leaf_id);
                G[leaf] += p - target;
                H[leaf] += std::max(p * (1 - p), 1e-16);
            }
            for (int l = 0; l < t.n_leaves; ++l) {
                const double expect = -G[static_cast<std::size_t>(l)] / (H[static_cast<std::size_t>(l)] + m.params.lambda);
                worst = std::max(worst, std::abs(leaf_by_id(t, l)->weight - expect));
            }
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("identical labels grow single-leaf trees") {
    Rng rng(1);
    const Matrix x = testsupport::random_matrix(40, 3, rng);
    const std::vector<int> y(40, 1);
    const auto m = train_gbdt(x, y, options(4, 30));
    for (const auto& t : m.trees) CHECK(t.n_leaves == 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        CHECK(predict_proba(m, x.row(i))[0] > 0.99);
        for (int v : leaf_embedding(m, x.row(i))) CHECK(v == 0);
    }
}

TEST_CASE("separable 2D set reaches training accuracy 1") {
    Rng rng(2);
    std::vector<int> y;
    const Matrix x = separable(200, rng, y);
    const auto m = train_gbdt(x, y, options(3, 20));
    CHECK(accuracy(m, x, y) == 1.0);

    double same = 0, cross = 0;
    std::size_t n_same = 0, n_cross = 0;
    std::vector<LeafIndexVector> leaves;
    for (std::size_t i = 0; i < x.rows(); ++i) leaves.push_back(leaf_embedding(m, x.row(i)));
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = i + 1; j < x.rows(); ++j) {
            double shared = 0;
            for (std::size_t t = 0; t < leaves[i].size(); ++t) shared += leaves[i][t] == leaves[j][t];
            (y[i] == y[j] ? same : cross) += shared;
            ++(y[i] == y[j] ? n_same : n_cross);
        }
    CHECK(same / n_same > cross / n_cross);
}

TEST_CASE("softmax separates 3 well-spaced blobs") {
    Rng rng(3);
    std::vector<int> y;
    const Matrix x = blobs({{0, 0}, {10, 0}, {0, 10}}, 50, 0.5, rng, y);
    auto o = options(2, 20);
    o.objective = Objective::softmax;
    o.num_classes = 3;
    const auto m = train_gbdt(x, y, o);
    CHECK(m.trees.size() == 60);
    CHECK(accuracy(m, x, y) >= 0.99);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto p = predict_proba(m, x.row(i));
        double s = 0;
        for (double v : p) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
        CHECK(leaf_embedding(m, x.row(i)).size() == 60);
        CHECK(leaf_embedding(m, x.row(i), LeafScope::class_trees, 1).size() == 20);
    }
    CHECK_THROWS_AS(leaf_embedding(m, x.row(0), LeafScope::class_trees, 3), Error);
}

TEST_CASE("prediction edge cases") {
    Rng rng(4);
    std::vector<int> y;
    const Matrix x = separable(50, rng, y);
    const auto m = train_gbdt(x, y, options(2, 5));
    CHECK(predict_proba(m, x.row(0), 0)[0] == 0.5);
    const std::vector<double> wrong{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(predict_proba(m, wrong), Error);
    CHECK_THROWS_AS(leaf_embedding(m, wrong), Error);
    CHECK(leaf_embedding(m, x.row(3)) == leaf_embedding(m, x.row(3)));

    GbdtModel uniform;
    uniform.objective = Objective::softmax;
    uniform.num_classes = 4;
    uniform.num_features = 1;
    const std::vector<double> one{0.0};
    for (double p : predict_proba(uniform, one)) CHECK(p == 0.25);
}

TEST_CASE("training errors") {
    Matrix x(3, 1, 0.0);
    std::vector<int> y{0, 1, 0};
    CHECK_THROWS_AS(train_gbdt(x, y, options(2, 0)), Error);
    x(1, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train_gbdt(x, y, options(2, 3));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::training);
    }
}

TEST_CASE("property: leaf weights, margin reconstruction and monotone loss") {
    Rng rng(5);
    std::vector<int> y;
    const Matrix x = blobs({{0, 0, 0}, {1.5, 1, 0}, {0, 1.5, 1}}, 40, 1.0, rng, y);
    for (auto objective : {Objective::logistic, Objective::softmax}) {
        CAPTURE(static_cast<int>(objective));
        auto o = options(3, 25);
        o.objective = objective;
        o.num_classes = 3;
        std::vector<int> labels = y;
        if (objective == Objective::logistic)
            for (int& v : labels) v = v == 2 ? 1 : 0;
        std::vector<double> losses;
        o.on_round = [&](int, double loss) { losses.push_back(loss); };
        const auto m = train_gbdt(x, labels, o);
        CHECK(max_leaf_weight_error(m, x, labels) < 1e-9);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const auto a = margin_from_leaves(m, leaf_embedding(m, x.row(i)));
            const auto b = predict_margin(m, x.row(i));
            for (std::size_t c = 0; c < a.size(); ++c) CHECK(std::abs(a[c] - b[c]) < 1e-9);
        }
        REQUIRE(losses.size() == 26);
        for (std::size_t r = 1; r < losses.size(); ++r) CHECK(losses[r] <= losses[r - 1] + kLossNoise);
        CHECK(std::abs(losses.back() - mean_loss(m, x, labels)) < 1e-9);
    }
}

TEST_CASE("property: training-loss monotone over 100 rounds on the synthetic corpus") {
    const auto p = testsupport::synthetic_dataset(4, 60, 0.3, 17);
    const auto train = p.data.rows_in(features::Split::train);
    const Matrix x = p.data.X.select_rows(train);
    std::vector<int> y;
    for (auto r : train) y.push_back(p.data.y_binary[r]);
    auto o = options(4, 100);
    std::vector<double> losses;
    o.on_round = [&](int, double loss) { losses.push_back(loss); };
    const auto m = train_gbdt(x, y, o);
    for (std::size_t r = 1; r < losses.size(); ++r) CHECK(losses[r] <= losses[r - 1] + kLossNoise);
    CHECK(max_leaf_weight_error(m, x, y) < 1e-9);
}

TEST_CASE("property: permuting training rows leaves the model unchanged") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> y;
        const Matrix x = blobs({{0, 0}, {1, 1}}, 30, 1.0, rng, y);
        std::vector<std::size_t> perm(x.rows());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        std::vector<int> yp;
        for (auto r : perm) yp.push_back(y[r]);
        const auto a = train_gbdt(x, y, options(3, 10));
        const auto b = train_gbdt(x.select_rows(perm), yp, options(3, 10));
        REQUIRE(a.trees.size() == b.trees.size());
        for (std::size_t t = 0; t < a.trees.size(); ++t) {
            REQUIRE(a.trees[t].nodes.size() == b.trees[t].nodes.size());
            for (std::size_t n = 0; n < a.trees[t].nodes.size(); ++n) {
                const auto &u = a.trees[t].nodes[n], &v = b.trees[t].nodes[n];
                CHECK(u.feature == v.feature);
                CHECK(u.threshold == v.threshold);
                CHECK(u.leaf_id == v.leaf_id);
                CHECK(std::abs(u.weight - v.weight) < 1e-12);
            }
        }
    }
}

TEST_CASE("grid search") {
    Rng rng(7);
    Matrix x;
    std::vector<int> y;
    for (int i = 0; i < 160; ++i) {
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
        x.append_row(std::vector<double>{a, b});
        y.push_back((a > 0) != (b > 0) ? 1 : 0);
    }
    GridSpec single{{3}, {0.3}, {10}};
    auto r = grid_search_cv(x, y, options(6, 10), single, 3, 1);
    CHECK(r.best.max_depth == 3);
    CHECK(r.entries.size() == 1);

    GridSpec xor_grid{{1, 4}, {0.3}, {20}};
    r = grid_search_cv(x, y, options(6, 20), xor_grid, 4, 1);
    CHECK(r.best.max_depth == 4);
    CHECK(r.entries[1].mean_accuracy > r.entries[0].mean_accuracy);
    const auto again = grid_search_cv(x, y, options(6, 20), xor_grid, 4, 1);
    CHECK(again.best.max_depth == r.best.max_depth);
    CHECK(again.best_accuracy == r.best_accuracy);

    std::vector<int> rare(y.size(), 0);
    rare[0] = 1;
    try {
        grid_search_cv(x, rare, options(6, 5), single, 3, 1);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::fold_construction);
    }
    for (const auto& fold : stratified_folds(y, 4, 2)) {
        std::size_t pos = 0;
        for (auto i : fold) pos += y[i];
        CHECK(pos > 0);
        CHECK(pos < fold.size());
    }
}

TEST_CASE("model json round trip is bit faithful") {
    Rng rng(8);
    std::vector<int> y;
    const Matrix x = blobs({{0, 0}, {2, 1}, {1, 3}}, 20, 1.0, rng, y);
    auto o = options(3, 6, 0.1 + 1e-13);
    o.objective = Objective::softmax;
    o.num_classes = 3;
    o.params.base_score = 0.123456789012345;
    const auto m = train_gbdt(x, y, o);
    const auto path = std::filesystem::temp_directory_path() / "malsim_test_gbdt.json";
    save_model(m, path);
    const auto back = load_model(path);
    std::filesystem::remove(path);
    CHECK(to_json(back) == to_json(m));
    for (std::size_t i = 0; i < x.rows(); ++i) CHECK(predict_margin(back, x.row(i)) == predict_margin(m, x.row(i)));
    CHECK(back.params.learning_rate == m.params.learning_rate);
    CHECK(model_from_json(to_json(m)).trees.size() == m.trees.size());
}
