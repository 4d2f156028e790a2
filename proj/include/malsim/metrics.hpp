#pragma once

// Clustering-validity and classification metrics.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "malsim/common.hpp"

namespace malsim::metrics {

/// Mean silhouette over all rows; members of singleton clusters contribute 0.
double silhouette(const Matrix& x, std::span<const int> labels);

/// Davies-Bouldin index over the clusters present in `labels`.
double davies_bouldin(const Matrix& x, std::span<const int> labels);

struct CalinskiHarabasz {
    double value = 0.0;
    bool infinite = false;  // zero within-cluster scatter
};

CalinskiHarabasz calinski_harabasz(const Matrix& x, std::span<const int> labels);

struct ClusterMetricsReport {
    double silhouette = 0.0;
    double davies_bouldin = 0.0;
    double calinski_harabasz = 0.0;
    bool calinski_harabasz_infinite = false;
    std::size_t n = 0;
    std::size_t k = 0;
};

/// Evaluates all three clustering metrics. With `sample` set and smaller than
/// the row count, a seeded uniform subsample of that many rows is used.
ClusterMetricsReport cluster_metrics(const Matrix& x, std::span<const int> labels,
                                     std::optional<std::size_t> sample = std::nullopt, std::uint64_t seed = 0);

/// Mann-Whitney AUC; tied positive/negative pairs count one half.
double roc_auc_binary(std::span<const int> y_true, std::span<const double> scores);

enum class Averaging { macro, weighted };

struct OvrAuc {
    double value = 0.0;
    std::vector<double> per_class;      // NaN for skipped classes
    std::vector<int> skipped_classes;   // absent from y_true (or no negatives)
};

/// One-vs-rest AUC; `scores` is N x K.
OvrAuc roc_auc_ovr(std::span<const int> y_true, const Matrix& scores, Averaging averaging);

/// Fraction of rows whose true class is among the k highest scores
/// (ties broken by ascending class index).
double top_k_accuracy(std::span<const int> y_true, const Matrix& scores, int k);

std::vector<std::vector<long>> confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred,
                                                int num_classes);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;
};

struct ClassificationReport {
    int num_classes = 0;
    std::size_t n = 0;
    double accuracy = 0.0;
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
    std::vector<std::vector<long>> confusion;
    bool zero_division = false;
    std::optional<double> roc_auc;           // binary
    std::optional<double> roc_auc_ovr_macro; // multiclass
    std::optional<double> roc_auc_ovr_weighted;
    std::vector<int> auc_skipped_classes;
    std::optional<double> top_k_accuracy;
    int top_k = 0;
};

struct ReportOptions {
    bool want_auc = false;
    int top_k = 0;  // 0: not computed
};

/// `scores`: N x 1 positive-class scores for binary tasks, N x K otherwise.
ClassificationReport classification_report(std::span<const int> y_true, std::span<const int> y_pred,
                                           int num_classes, const Matrix* scores = nullptr,
                                           const ReportOptions& options = {});

nlohmann::json to_json(const ClusterMetricsReport& r);
nlohmann::json to_json(const ClassificationReport& r);

}  // namespace malsim::metrics
