#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <numeric>

#include "malsim/similarity.hpp"
#include "brute_force.hpp"
#include "support.hpp"

using namespace malsim;
using namespace malsim::similarity;
using testsupport::error_code_of;
using testsupport::random_matrix;

namespace {

std::shared_ptr<EmbeddingSet> make_set(const Matrix& x, std::vector<int> labels,
                                       EmbeddingKind kind = EmbeddingKind::continuous,
                                       std::vector<std::string> ids = {}) {
    auto s = std::make_shared<EmbeddingSet>();
    if (ids.empty())
        for (std::size_t i = 0; i < x.rows(); ++i) ids.push_back("s" + std::to_string(1000 + i));
    s->ids = std::move(ids);
    s->vectors = x;
    s->labels_binary = std::move(labels);
    s->kind = kind;
    s->source = "test";
    return s;
}

Matrix line_points(const std::vector<double>& xs) {
    Matrix m;
    for (double v : xs) m.append_row(std::vector<double>{v});
    return m;
}

// Independent reference: long double accumulation with Neumaier compensation.
double reference_euclidean(std::span<const double> a, std::span<const double> b) {
    long double s = 0, c = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const long double d = static_cast<long double>(a[j]) - b[j];
        const long double t = s + d * d;
        c += std::fabs(s) >= d * d ? (s - t) + d * d : (d * d - t) + s;
        s = t;
    }
    return static_cast<double>(std::sqrt(s + c));
}

// Full sort of every candidate, ties by id.
std::vector<std::pair<std::string, double>> reference_knn(const EmbeddingSet& s, std::size_t q, std::size_t k) {
    std::vector<std::pair<double, std::string>> all;
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (j == q) continue;
        double acc = 0;
        for (std::size_t c = 0; c < s.dimension(); ++c) {
            const double d = s.vectors(q, c) - s.vectors(j, c);
            acc += d * d;
        }
        all.emplace_back(std::sqrt(acc), s.ids[j]);
    }
    std::sort(all.begin(), all.end());
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < k; ++i) out.emplace_back(all[i].second, all[i].first);
    return out;
}

}  // namespace

TEST_CASE("euclidean: 3-4-5 triangle and a reference on random pairs") {
    const std::vector<double> a{0, 0}, b{3, 4};
    CHECK(euclidean_distance(a, b) == 5.0);
    Rng rng(21);
    for (int t = 0; t < 100; ++t) {
        const Matrix m = random_matrix(2, 1 + rng.below(64), rng, 1.0 + 100 * rng.uniform());
        const double got = euclidean_distance(m.row(0), m.row(1));
        const double want = reference_euclidean(m.row(0), m.row(1));
        CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, want));
    }
    const std::vector<double> c{1, 2, 3};
    CHECK(error_code_of([&] { euclidean_distance(a, c); }) == ErrorCode::dimension_mismatch);
}

TEST_CASE("leaf overlap: worked examples") {
    const std::vector<int> a{3, 1, 4, 1}, b{3, 1, 5, 9}, c{0, 0, 0, 0};
    CHECK(leaf_overlap_distance(std::span<const int>(a), std::span<const int>(a)) == 0.0);
    CHECK(leaf_overlap_distance(std::span<const int>(a), std::span<const int>(b)) == 0.5);
    const std::vector<int> d{9, 9, 9, 9};
    CHECK(leaf_overlap_distance(std::span<const int>(c), std::span<const int>(d)) == 1.0);
    const std::vector<double> e{1, 2}, f{1, 2, 3};
    CHECK(error_code_of([&] { leaf_overlap_distance(std::span<const double>(e), std::span<const double>(f)); }) ==
          ErrorCode::dimension_mismatch);
}

TEST_CASE("property: both distances satisfy the metric axioms") {
    Rng rng(5);
    for (int t = 0; t < 300; ++t) {
        const std::size_t d = 1 + rng.below(20);
        const Matrix x = random_matrix(3, d, rng);
        Matrix leaves(3, d);
        for (auto& v : leaves.data()) v = static_cast<double>(rng.below(3));
        for (int kind = 0; kind < 2; ++kind) {
            const Matrix& m = kind == 0 ? x : leaves;
            auto dist = [&](std::size_t i, std::size_t j) {
                return kind == 0 ? euclidean_distance(m.row(i), m.row(j)) : leaf_overlap_distance(m.row(i), m.row(j));
            };
            for (std::size_t i = 0; i < 3; ++i) {
                CHECK(dist(i, i) == 0.0);
                for (std::size_t j = 0; j < 3; ++j) {
                    CHECK(dist(i, j) >= 0.0);
                    CHECK(dist(i, j) == dist(j, i));
                    if (kind == 1) CHECK(dist(i, j) <= 1.0);
                    const bool equal = std::equal(m.row(i).begin(), m.row(i).end(), m.row(j).begin());
                    CHECK((dist(i, j) == 0.0) == equal);
                    for (std::size_t k = 0; k < 3; ++k) CHECK(dist(i, k) <= dist(i, j) + dist(j, k) + 1e-12);
                }
            }
        }
    }
}

TEST_CASE("index: two points return each other") {
    const BruteForceIndex idx(make_set(line_points({0, 2}), {0, 1}), Metric::euclidean);
    const auto nb = idx.query_row(0, 1);
    REQUIRE(nb.size() == 1);
    CHECK(nb[0].id == "s1001");
    CHECK(nb[0].distance == 2.0);
    const auto with_self = idx.query_row(0, 1, false);
    CHECK(with_self[0].id == "s1000");
    CHECK(with_self[0].distance == 0.0);
}

TEST_CASE("index: 500 points against a full-sort oracle") {
    Rng rng(77);
    Matrix x(500, 6);
    // Coarse integer grid so distance ties are common.
    for (auto& v : x.data()) v = static_cast<double>(rng.below(4));
    std::vector<std::string> ids;
    for (int i = 0; i < 500; ++i) ids.push_back(hex64(rng.next_u64()));
    auto set = make_set(x, std::vector<int>(500, 0), EmbeddingKind::continuous, ids);
    const BruteForceIndex idx(set, Metric::euclidean);
    for (std::size_t q = 0; q < 500; ++q) {
        const auto got = idx.query_row(q, 10);
        const auto want = reference_knn(*set, q, 10);
        REQUIRE(got.size() == 10);
        for (std::size_t r = 0; r < 10; ++r) {
            CHECK(got[r].id == want[r].first);
            CHECK(got[r].distance == want[r].second);
        }
    }
}

TEST_CASE("index: K = N-1 returns every other point; duplicates come first in id order") {
    auto set = make_set(line_points({5, 5, 5, 1, 9}), {0, 0, 1, 1, 0}, EmbeddingKind::continuous,
                        {"e", "c", "a", "d", "b"});
    const BruteForceIndex idx(set, Metric::euclidean);
    const auto nb = idx.query_id("e", 4);
    REQUIRE(nb.size() == 4);
    CHECK(nb[0].id == "a");
    CHECK(nb[1].id == "c");
    CHECK(nb[0].distance == 0.0);
    CHECK(nb[1].distance == 0.0);
    CHECK(nb[2].id == "b");
    CHECK(nb[3].id == "d");
}

TEST_CASE("index: oversized K is clamped with a warning; unknown ids fail") {
    std::vector<std::string> warnings;
    set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    const BruteForceIndex idx(make_set(line_points({0, 1, 2, 3, 4}), {0, 0, 0, 1, 1}), Metric::euclidean);
    const auto nb = idx.query_row(2, 100);
    set_warning_sink([](const std::string& m) { std::cerr << "warning: " << m << '\n'; });
    CHECK(nb.size() == 4);
    CHECK(warnings.size() == 1);
    CHECK(error_code_of([&] { idx.query_id("nope", 1); }) == ErrorCode::unknown_id);
    CHECK(error_code_of([&] { idx.query_row(9, 1); }) == ErrorCode::unknown_id);
    CHECK(error_code_of([&] { idx.query_row(0, 0); }) == ErrorCode::config);
    const std::vector<double> wrong{1, 2};
    CHECK(error_code_of([&] { idx.query_vector(wrong, 1); }) == ErrorCode::dimension_mismatch);
}

TEST_CASE("index: construction errors") {
    CHECK(error_code_of([&] { BruteForceIndex(make_set(line_points({0}), {0}), Metric::euclidean); }) ==
          ErrorCode::config);
    CHECK(error_code_of([&] {
              BruteForceIndex(make_set(line_points({0.5, 1, 2}), {0, 0, 1}), Metric::leaf_overlap);
          }) == ErrorCode::kind_mismatch);
    CHECK(error_code_of([&] {
              BruteForceIndex(make_set(line_points({0.5, 1}), {0, 1}, EmbeddingKind::leaf_index),
                              Metric::leaf_overlap);
          }) == ErrorCode::kind_mismatch);
    CHECK(error_code_of([&] {
              BruteForceIndex(make_set(line_points({0, 1}), {0, 1}, EmbeddingKind::continuous, {"x", "x"}),
                              Metric::euclidean);
          }) == ErrorCode::config);
}

TEST_CASE("property: neighbor lists are invariant to row order") {
    Rng rng(8);
    const Matrix x = random_matrix(120, 5, rng);
    std::vector<int> labels(120);
    for (auto& l : labels) l = static_cast<int>(rng.below(2));
    auto base = make_set(x, labels);
    std::vector<std::size_t> perm(120);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    auto shuffled = std::make_shared<EmbeddingSet>(*base);
    shuffled->vectors = x.select_rows(perm);
    for (std::size_t i = 0; i < 120; ++i) {
        shuffled->ids[i] = base->ids[perm[i]];
        shuffled->labels_binary[i] = base->labels_binary[perm[i]];
    }
    const BruteForceIndex a(base, Metric::euclidean), b(shuffled, Metric::euclidean);
    for (std::size_t i = 0; i < 120; ++i) {
        const auto na = a.query_id(base->ids[i], 15), nb = b.query_id(base->ids[i], 15);
        for (std::size_t r = 0; r < 15; ++r) {
            CHECK(na[r].id == nb[r].id);
            CHECK(na[r].distance == nb[r].distance);
        }
    }
    const std::vector<std::size_t> ks{1, 5, 15};
    const auto ra = label_homogeneity_at_k(a, ks), rb = label_homogeneity_at_k(b, ks);
    for (std::size_t t = 0; t < ks.size(); ++t) {
        CHECK(ra.rows[t].all.mean == doctest::Approx(rb.rows[t].all.mean).epsilon(1e-12));
        CHECK(ra.rows[t].all.std == doctest::Approx(rb.rows[t].all.std).epsilon(1e-12));
    }
}

TEST_CASE("homogeneity: uniform labels and separated clusters reach K") {
    Rng rng(3);
    const Matrix x = random_matrix(40, 3, rng);
    const std::vector<std::size_t> ks{1, 5, 39};
    const auto same = label_homogeneity_at_k(BruteForceIndex(make_set(x, std::vector<int>(40, 1)), Metric::euclidean), ks);
    for (std::size_t t = 0; t < ks.size(); ++t) {
        CHECK(same.rows[t].all.mean == static_cast<double>(ks[t]));
        CHECK(same.rows[t].all.std == 0.0);
        CHECK(same.rows[t].benign.count == 0);
    }

    std::vector<int> labels;
    const Matrix clusters = testsupport::blobs({{0, 0}, {1000, 0}, {0, 1000}, {1000, 1000}}, 20, 1.0, rng, labels);
    for (auto& l : labels) l %= 2;
    const std::vector<std::size_t> ks2{1, 10, 19};
    const auto sep = label_homogeneity_at_k(BruteForceIndex(make_set(clusters, labels), Metric::euclidean), ks2);
    for (std::size_t t = 0; t < ks2.size(); ++t) {
        CHECK(sep.rows[t].benign.mean == static_cast<double>(ks2[t]));
        CHECK(sep.rows[t].malicious.mean == static_cast<double>(ks2[t]));
        CHECK(sep.rows[t].all.std == 0.0);
    }
}

TEST_CASE("homogeneity: planted six-point instance matches hand counts") {
    // a b | c flipped | d e f on a line; b's neighbors a and c tie, id order keeps a.
    auto set = make_set(line_points({0, 1, 2, 10, 11, 12}), {0, 0, 1, 1, 1, 1}, EmbeddingKind::continuous,
                        {"a", "b", "c", "d", "e", "f"});
    const std::vector<std::size_t> ks{1, 2};
    const auto r = label_homogeneity_at_k(BruteForceIndex(set, Metric::euclidean), ks);
    CHECK(r.n == 6);
    CHECK(r.queries == 6);
    CHECK(r.rows[0].benign.mean == 1.0);
    CHECK(r.rows[0].malicious.mean == 0.75);
    CHECK(r.rows[1].benign.mean == 1.0);
    CHECK(r.rows[1].benign.std == 0.0);
    CHECK(r.rows[1].malicious.mean == 1.5);
    CHECK(r.rows[1].malicious.std == doctest::Approx(std::sqrt(0.75)).epsilon(1e-12));
    CHECK(r.rows[1].all.mean == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(r.rows[1].all.std == doctest::Approx(std::sqrt(5.0 / 9.0)).epsilon(1e-12));
    CHECK(r.rows[1].malicious.count == 4);

    const std::string csv = homogeneity_csv(r, "Planted");
    CHECK(csv.rfind("# Planted\nK,Benign Mean,Benign Std,Malicious Mean,Malicious Std,All Mean,All Std\n", 0) == 0);
    CHECK(csv.find("\n2,1.0000,0.0000,1.5000,0.8660,1.3333,0.7454\n") != std::string::npos);
    CHECK(to_json(r)["rows"][1]["malicious"]["count"] == 4);
}

TEST_CASE("property: homogeneity bounds, weighted mean and monotone in K") {
    Rng rng(44);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 30 + rng.below(100);
        const Matrix x = random_matrix(n, 1 + rng.below(8), rng);
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.below(2));
        const std::vector<std::size_t> ks{1, 3, 7, 20};
        const auto r = label_homogeneity_at_k(BruteForceIndex(make_set(x, labels), Metric::euclidean), ks);
        for (std::size_t i = 0; i < ks.size(); ++i) {
            const auto& row = r.rows[i];
            CHECK(row.all.mean >= 0.0);
            CHECK(row.all.mean <= static_cast<double>(ks[i]));
            CHECK(row.benign.count + row.malicious.count == n);
            const double combined =
                (row.benign.mean * row.benign.count + row.malicious.mean * row.malicious.count) / static_cast<double>(n);
            CHECK(std::abs(row.all.mean - combined) <= 1e-12 * std::max(1.0, combined));
            if (i > 0) CHECK(row.all.mean >= r.rows[i - 1].all.mean);
        }
        const auto mc = match_counts(BruteForceIndex(make_set(x, labels), Metric::euclidean), ks, LabelField::binary);
        for (const auto& c : mc.counts)
            for (std::size_t i = 1; i < ks.size(); ++i) CHECK(c[i] >= c[i - 1]);
    }
}

TEST_CASE("homogeneity: randomized instances against a full-sort oracle") {
    Rng rng(505);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 12 + rng.below(200), d = 1 + rng.below(16);
        Matrix x = random_matrix(n, d, rng);
        // Half the instances on a coarse grid so ties exercise the id rule.
        if (t % 2 == 0)
            for (auto& v : x.data()) v = std::round(v);
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.below(2));
        auto set = make_set(x, labels);
        const std::vector<std::size_t> ks{1, 5, 10};
        const auto r = label_homogeneity_at_k(BruteForceIndex(set, Metric::euclidean), ks);
        for (std::size_t i = 0; i < ks.size(); ++i) {
            const auto want = brute::homogeneity(x, labels, set->ids, ks[i]);
            CHECK(std::abs(r.rows[i].benign.mean - want.benign_mean) < 1e-9);
            CHECK(std::abs(r.rows[i].malicious.mean - want.malicious_mean) < 1e-9);
            CHECK(std::abs(r.rows[i].all.mean - want.all_mean) < 1e-9);
            CHECK(std::abs(r.rows[i].all.std - want.all_std) < 1e-9);
        }
    }
}

TEST_CASE("homogeneity: configuration errors, sampling and family labels") {
    const BruteForceIndex idx(make_set(line_points({0, 1, 2, 3}), {0, 1, 0, 1}), Metric::euclidean);
    const std::vector<std::size_t> too_big{4}, zero{0}, none{};
    CHECK(error_code_of([&] { label_homogeneity_at_k(idx, too_big); }) == ErrorCode::config);
    CHECK(error_code_of([&] { label_homogeneity_at_k(idx, zero); }) == ErrorCode::config);
    CHECK(error_code_of([&] { label_homogeneity_at_k(idx, none); }) == ErrorCode::config);
    const std::vector<std::size_t> one{1};
    CHECK(error_code_of([&] { label_homogeneity_at_k(idx, one, LabelField::family); }) == ErrorCode::config);

    Rng rng(2);
    auto set = make_set(random_matrix(50, 2, rng), std::vector<int>(50, 1));
    set->labels_family.resize(50);
    for (std::size_t i = 0; i < 50; ++i) set->labels_family[i] = i % 5 == 0 ? -1 : static_cast<int>(i % 3);
    const BruteForceIndex fam(set, Metric::euclidean);
    const auto r = label_homogeneity_at_k(fam, one, LabelField::family);
    CHECK(r.queries == 40);
    const auto a = match_counts(fam, one, LabelField::family, 7, 11), b = match_counts(fam, one, LabelField::family, 7, 11);
    CHECK(a.query_rows.size() == 7);
    CHECK(a.query_rows == b.query_rows);
    for (auto q : a.query_rows) CHECK(set->labels_family[q] >= 0);
    CHECK(std::is_sorted(a.query_rows.begin(), a.query_rows.end()));

    // Rows without a family never count as matches, even against each other.
    auto unlabeled = make_set(line_points({0, 0.1, 5}), {1, 1, 1});
    unlabeled->labels_family = {-1, -1, 2};
    const auto mc = match_counts(BruteForceIndex(unlabeled, Metric::euclidean), one, LabelField::family);
    REQUIRE(mc.query_rows.size() == 1);
    CHECK(mc.counts[0][0] == 0);
}

TEST_CASE("leaf-overlap index ranks by shared leaves") {
    Matrix leaves;
    leaves.append_row(std::vector<double>{1, 2, 3, 4});
    leaves.append_row(std::vector<double>{1, 2, 3, 5});
    leaves.append_row(std::vector<double>{1, 7, 7, 7});
    leaves.append_row(std::vector<double>{0, 0, 0, 0});
    const BruteForceIndex idx(make_set(leaves, {1, 1, 0, 0}, EmbeddingKind::leaf_index), Metric::leaf_overlap);
    const auto nb = idx.query_row(0, 3);
    CHECK(nb[0].row == 1);
    CHECK(nb[0].distance == 0.25);
    CHECK(nb[1].row == 2);
    CHECK(nb[1].distance == 0.75);
    CHECK(nb[2].distance == 1.0);
}

TEST_CASE("embeddings csv round-trips exactly") {
    const auto dir = std::filesystem::temp_directory_path() / "malsim_test_similarity";
    std::filesystem::create_directories(dir);
    Rng rng(13);
    auto set = make_set(random_matrix(20, 4, rng, 1e3), std::vector<int>(20, 0));
    set->ids[3] = "has,comma";
    set->ids[4] = "has \"quote\"";
    set->labels_family.assign(20, -1);
    set->labels_family[7] = 12;
    set->labels_binary[7] = 1;
    set->vectors(0, 0) = 1e-300;
    write_embeddings(*set, dir / "emb.csv", Metric::euclidean);
    Metric metric = Metric::leaf_overlap;
    const EmbeddingSet back = read_embeddings(dir / "emb.csv", &metric);
    CHECK(metric == Metric::euclidean);
    CHECK(back.ids == set->ids);
    CHECK(back.labels_binary == set->labels_binary);
    CHECK(back.labels_family == set->labels_family);
    CHECK(back.vectors.data() == set->vectors.data());
    CHECK(back.kind == EmbeddingKind::continuous);
    CHECK(back.source == "test");

    Matrix leaves(3, 2);
    leaves.data() = {0, 5, 17, 2, 3, 3};
    auto leaf_set = make_set(leaves, {0, 1, 1}, EmbeddingKind::leaf_index);
    write_embeddings(*leaf_set, dir / "leaves.csv", Metric::leaf_overlap);
    const EmbeddingSet lb = read_embeddings(dir / "leaves.csv", &metric);
    CHECK(metric == Metric::leaf_overlap);
    CHECK(lb.kind == EmbeddingKind::leaf_index);
    CHECK(lb.labels_family.empty());
    CHECK(lb.vectors.data() == leaves.data());

    CHECK(error_code_of([&] { read_embeddings(dir / "absent.csv"); }) == ErrorCode::missing_artifact);
    std::filesystem::remove_all(dir);
}
