#pragma once

// Static PE metadata pipeline: JSONL parsing, cleaning, bag-of-words
// vocabularies, vectorization, z-score normalization and stratified splits.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "malsim/common.hpp"

namespace malsim::features {

enum class Label { benign = 0, malicious = 1, unknown = 2 };

struct RawRecord {
    std::string sha256;
    Label label = Label::unknown;
    std::optional<std::string> avclass;
    std::vector<double> histogram;
    std::vector<double> byteentropy;
    std::vector<double> printabledist;
    std::vector<std::string> imports;  // "library:function"
    std::vector<std::string> exports;
    std::vector<std::string> section_properties;
    std::map<std::string, double> header_fields;  // flattened dotted paths
    // Non-empty when a numeric array held a non-numeric entry; clean_and_dedup drops these.
    std::vector<std::string> defects;
};

struct ParseResult {
    std::vector<RawRecord> records;
    std::size_t skipped = 0;
    std::size_t lines = 0;  // non-blank lines seen
};

/// Parses one JSON object. Returns nullopt for lines that must be skipped
/// (invalid JSON, not an object, missing or empty sha256).
std::optional<RawRecord> parse_record_line(std::string_view line);

/// Malformed lines are counted in `skipped`. An empty stream yields an empty
/// result; a non-empty stream with zero valid records raises empty_corpus.
ParseResult parse_records(std::istream& in);
ParseResult parse_records_file(const std::filesystem::path& path);

struct CleanStats {
    std::size_t removed_malformed = 0;
    std::size_t removed_duplicates = 0;
};

/// Drops records with defective or non-finite/negative numeric arrays, then
/// keeps the first occurrence of every sha256.
std::vector<RawRecord> clean_and_dedup(std::vector<RawRecord> records, CleanStats* stats = nullptr);

inline constexpr std::size_t kDefaultVocabCap = 2048;

struct Vocabulary {
    std::string field_name;
    std::vector<std::string> tokens;  // index order
    std::unordered_map<std::string, std::size_t> token_to_index;
    std::size_t cap = kDefaultVocabCap;

    std::size_t size() const noexcept { return tokens.size(); }
    std::optional<std::size_t> lookup(const std::string& token) const;
    static Vocabulary from_tokens(std::string field_name, std::vector<std::string> tokens,
                                  std::size_t cap);
};

/// Token list of a bag-of-words field: "imports", "exports" or "section_properties".
const std::vector<std::string>& bow_tokens(const RawRecord& record, std::string_view field_name);

/// Top `cap` tokens by descending occurrence count, ties by ascending token.
Vocabulary build_vocabulary(std::span<const RawRecord> records, std::string_view field_name,
                            std::size_t cap = kDefaultVocabCap);

struct Vocabularies {
    Vocabulary imports;
    Vocabulary exports;
    Vocabulary sections;
};

struct LayoutConfig {
    std::size_t histogram_dim = 256;
    std::size_t byteentropy_dim = 256;
    std::size_t printabledist_dim = 96;
    std::vector<std::string> header_fields;  // fixed scalar order
    bool binarize_bow = false;
};

struct Block {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct FeatureLayout {
    std::vector<Block> blocks;
    std::size_t dimension = 0;

    const Block& block(std::string_view name) const;
};

FeatureLayout make_layout(const LayoutConfig& config, const Vocabularies& vocabs);

using FeatureVector = std::vector<double>;

/// Throws vectorization when a numeric array disagrees with the layout.
FeatureVector vectorize(const RawRecord& record, const Vocabularies& vocabs, const LayoutConfig& config);

/// Sorted union of header field names across records.
std::vector<std::string> collect_header_fields(std::span<const RawRecord> records);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;  // population
    double epsilon = 1e-12;

    double divisor(std::size_t column) const { return std[column] < epsilon ? 1.0 : std[column]; }
};

NormStats fit_normalizer(const Matrix& x_train, double epsilon = 1e-12);
Matrix apply_normalizer(const NormStats& stats, const Matrix& x);

enum class Split : std::uint8_t { train, test };
std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct LabeledDataset {
    std::vector<std::string> ids;
    Matrix X;
    std::vector<int> y_binary;
    std::vector<int> y_family;               // -1 when the row has no family
    std::vector<std::string> family_names;   // family index -> name
    std::vector<Split> split;

    std::size_t size() const noexcept { return ids.size(); }
    std::size_t dimension() const noexcept { return X.cols(); }
    std::vector<std::size_t> rows_in(Split s) const;
    LabeledDataset subset(std::span<const std::size_t> rows) const;
};

/// Per-class shuffle (seeded) then round(|c| * train_fraction) rows go to train.
std::vector<Split> stratified_assignment(std::span<const int> classes, double train_fraction,
                                         std::uint64_t seed);

enum class StratifyBy { binary, family };

/// Assigns `split`. With family stratification, rows of families with fewer
/// than two members (or without a family) are dropped with a warning.
LabeledDataset stratified_split(const LabeledDataset& dataset, double train_fraction,
                                std::uint64_t seed, StratifyBy by = StratifyBy::binary);

/// Frequency-descending, lexicographic tie-break string index.
std::vector<std::string> rank_by_frequency(const std::map<std::string, std::size_t>& counts);

/// Keeps rows of the `n` most frequent families and re-encodes them 0..n-1.
LabeledDataset filter_top_n_families(const LabeledDataset& dataset, std::size_t n = 200);

/// weight[c] = N / (n_classes * count[c]).
std::vector<double> compute_class_weights(std::span<const int> family_labels, std::size_t n_classes);
std::vector<double> compute_class_weights(const LabeledDataset& dataset);

struct PipelineConfig {
    LayoutConfig layout;
    std::size_t vocab_cap = kDefaultVocabCap;
    double train_fraction = 0.8;
    std::uint64_t seed = 42;
    double norm_epsilon = 1e-12;
};

struct PipelineCounts {
    std::size_t input_records = 0;
    std::size_t removed_malformed = 0;
    std::size_t removed_duplicates = 0;
    std::size_t dropped_unknown = 0;
    std::size_t rejected_layout = 0;
    std::size_t train = 0;
    std::size_t test = 0;
};

struct PreparedDataset {
    LabeledDataset data;  // normalized
    Vocabularies vocabs;
    LayoutConfig layout;  // header_fields resolved
    FeatureLayout feature_layout;
    NormStats norm;
    PipelineConfig config;
    PipelineCounts counts;
};

/// clean -> drop unknown labels -> reject layout mismatches -> stratified split
/// -> fit vocabularies/header fields on train -> vectorize -> z-score (train stats).
PreparedDataset prepare_dataset(std::vector<RawRecord> records, const PipelineConfig& config);

nlohmann::json to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LayoutConfig& c);
LayoutConfig layout_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

/// Manifest body (layout, vocabularies, normalization, seed, counts).
nlohmann::json manifest_json(const PreparedDataset& prepared);

/// CSV with header id,label,family,split,f0..f{D-1}; values in shortest
/// round-trip fixed notation.
void write_dataset_csv(const LabeledDataset& dataset, const std::filesystem::path& path);
LabeledDataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace malsim::features
