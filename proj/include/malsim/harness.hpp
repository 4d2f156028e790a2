#pragma once

// Experiment orchestration: synthetic corpus, configuration, per-step
// commands with manifests, and report tables.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malsim/common.hpp"
#include "malsim/gbdt.hpp"
#include "malsim/neural.hpp"

namespace malsim::harness {

struct SyntheticCorpusSpec {
    std::size_t n_families = 20;
    std::size_t samples_per_family = 200;
    std::vector<bool> malicious;  // per family; empty: odd-indexed families are malicious
    double overlap = 0.3;         // 0: families separable; larger: noisier, more mimicry
    double duplicate_rate = 0.0;
    double malformed_rate = 0.0;
    double unlabeled_rate = 0.0;
    std::uint64_t seed = 42;
};

struct SynthCounts {
    std::size_t lines = 0;
    std::size_t samples = 0;
    std::size_t duplicates = 0;
    std::size_t malformed = 0;
    std::size_t unlabeled = 0;
};

/// EMBER-shaped JSONL plus a truth CSV `sha256,label,family`.
SynthCounts write_synthetic_corpus(const SyntheticCorpusSpec& spec, std::ostream& jsonl, std::ostream& truth);

nlohmann::json to_json(const SyntheticCorpusSpec& spec);
SyntheticCorpusSpec synth_spec_from_json(const nlohmann::json& j);

struct MlpSettings {
    std::vector<int> hidden{512, 256, 128};
    int embedding_dim = 128;
    double dropout = 0.3;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    int max_epochs = 50;
    int patience = 5;
    double validation_fraction = 0.1;
};

struct AeSettings {
    double fraction = 0.25;
    std::vector<int> hidden{256, 64};
    int bottleneck = 8;
    int epochs = 30;
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    std::string block;  // empty: full feature vector
};

struct GbdtSettings {
    gbdt::Hyperparams params;
    bool grid_search = false;
    gbdt::GridSpec grid;
    int cv_folds = 3;
    // "all_trees": rounds x K leaves for the family model; "predicted_class": only the
    // trees of the predicted class, `rounds` leaves.
    std::string family_leaf_scope = "all_trees";
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::optional<std::string> input;  // JSONL corpus; unset: the synthetic corpus
    SyntheticCorpusSpec synth;
    std::size_t vocab_cap = 2048;
    double train_fraction = 0.8;
    bool binarize_bow = false;
    std::size_t top_n_families = 200;
    std::vector<std::string> models{"ae", "mlp_binary", "mlp_family", "gbdt_binary", "gbdt_binary_family",
                                    "gbdt_family"};
    std::vector<std::string> sources{"raw_features", "ae", "mlp_binary", "mlp_family", "gbdt_binary",
                                     "gbdt_binary_family", "gbdt_family"};
    std::vector<std::size_t> k_list{1, 10, 50, 100};
    std::map<std::string, std::string> metric_per_source;  // default: leaf-overlap for gbdt_*, else euclidean
    std::string embed_split = "test";
    std::optional<std::size_t> cluster_sample;
    std::optional<std::size_t> knn_sample;
    MlpSettings mlp;
    AeSettings ae;
    GbdtSettings gbdt;

    std::string metric_for(const std::string& source) const;
};

/// Overlays `j` on the defaults; unknown keys are config errors.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);
/// FNV-1a over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& c);

struct RunOptions {
    std::filesystem::path out = "malsim-out";
    bool force = false;
    std::vector<std::string> only;      // restricts models / sources / classifiers for a step
    std::optional<std::string> metric;  // eval-knn override
};

void cmd_synth(const ExperimentConfig& c, const RunOptions& o);
void cmd_preprocess(const ExperimentConfig& c, const RunOptions& o);
void cmd_train(const ExperimentConfig& c, const RunOptions& o);
void cmd_embed(const ExperimentConfig& c, const RunOptions& o);
void cmd_eval_knn(const ExperimentConfig& c, const RunOptions& o);
void cmd_eval_cluster(const ExperimentConfig& c, const RunOptions& o);
void cmd_eval_classify(const ExperimentConfig& c, const RunOptions& o);
void cmd_report(const ExperimentConfig& c, const RunOptions& o);
/// synth (when no input corpus is configured) through report.
void run_all(const ExperimentConfig& c, const RunOptions& o);

/// Manifest helpers shared by the steps.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string file_digest(const std::filesystem::path& path);

}  // namespace malsim::harness
