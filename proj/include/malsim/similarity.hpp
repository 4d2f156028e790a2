#pragma once

// Exact top-K retrieval over embedding sets and Label-Homogeneity@K.

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "malsim/common.hpp"

namespace malsim::similarity {

enum class EmbeddingKind { continuous, leaf_index };
enum class Metric { euclidean, leaf_overlap };

std::string_view kind_name(EmbeddingKind k);
EmbeddingKind kind_from_name(std::string_view name);
std::string_view metric_name(Metric m);
Metric metric_from_name(std::string_view name);

struct EmbeddingSet {
    std::vector<std::string> ids;
    Matrix vectors;  // leaf indices are stored as exact integers
    std::vector<int> labels_binary;
    std::vector<int> labels_family;  // empty, or -1 for rows without a family
    EmbeddingKind kind = EmbeddingKind::continuous;
    std::string source;

    std::size_t size() const noexcept { return ids.size(); }
    std::size_t dimension() const noexcept { return vectors.cols(); }
    /// Throws on duplicate ids, ragged labels, or non-integer leaf values.
    void validate() const;
};

double euclidean_distance(std::span<const double> a, std::span<const double> b);
/// 1 - (positions with equal leaf) / T.
double leaf_overlap_distance(std::span<const double> a, std::span<const double> b);
double leaf_overlap_distance(std::span<const int> a, std::span<const int> b);

struct Neighbor {
    std::size_t row = 0;
    std::string id;
    double distance = 0.0;
};

class BruteForceIndex {
public:
    BruteForceIndex(std::shared_ptr<const EmbeddingSet> set, Metric metric);

    const EmbeddingSet& set() const noexcept { return *set_; }
    Metric metric() const noexcept { return metric_; }

    /// Ascending distance, ties by ascending id. K larger than the candidate
    /// count is clamped with a warning.
    std::vector<Neighbor> query_id(const std::string& id, std::size_t k, bool exclude_self = true) const;
    std::vector<Neighbor> query_row(std::size_t row, std::size_t k, bool exclude_self = true) const;
    std::vector<Neighbor> query_vector(std::span<const double> v, std::size_t k) const;

private:
    std::vector<Neighbor> search(std::span<const double> v, std::optional<std::size_t> skip, std::size_t k,
                                 bool warn) const;
    double distance(std::span<const double> a, std::span<const double> b) const;

    std::shared_ptr<const EmbeddingSet> set_;
    Metric metric_;
    std::unordered_map<std::string, std::size_t> row_of_;
};

enum class LabelField { binary, family };

struct GroupStats {
    double mean = 0.0;
    double std = 0.0;
    std::size_t count = 0;
};

struct HomogeneityRow {
    std::size_t k = 0;
    GroupStats benign, malicious, all;
};

struct HomogeneityReport {
    std::string source;
    Metric metric = Metric::euclidean;
    LabelField label_field = LabelField::binary;
    std::size_t n = 0;
    std::size_t queries = 0;
    std::vector<HomogeneityRow> rows;
};

/// Per-query match counts for each K (rows follow `query_rows`); queries are
/// every row unless `sample` selects a seeded subset.
struct MatchCounts {
    std::vector<std::size_t> query_rows;
    std::vector<std::vector<int>> counts;  // [query][k index]
};

MatchCounts match_counts(const BruteForceIndex& index, std::span<const std::size_t> ks, LabelField field,
                         std::optional<std::size_t> sample = std::nullopt, std::uint64_t seed = 0);

HomogeneityReport label_homogeneity_at_k(const BruteForceIndex& index, std::span<const std::size_t> ks,
                                         LabelField field = LabelField::binary,
                                         std::optional<std::size_t> sample = std::nullopt, std::uint64_t seed = 0);

nlohmann::json to_json(const HomogeneityReport& r);
/// Table-shaped CSV: one row per K, Benign/Malicious/All x Mean/Std.
std::string homogeneity_csv(const HomogeneityReport& r, const std::string& title);

/// CSV `id,label,family,e0..` plus a JSON sidecar with the same stem.
void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& csv_path,
                      Metric metric_default = Metric::euclidean);
EmbeddingSet read_embeddings(const std::filesystem::path& csv_path, Metric* metric_default = nullptr);

}  // namespace malsim::similarity
