#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "malsim/metrics.hpp"

namespace malsim::metrics {

namespace {

struct Clusters {
    std::vector<int> index;  // compact cluster index per row
    std::vector<std::size_t> sizes;
};

Clusters compact(const Matrix& x, std::span<const int> labels) {
    if (labels.size() != x.rows())
        throw Error(ErrorCode::dimension_mismatch, "label count differs from embedding row count");
    std::map<int, int> ids;
    for (int l : labels) ids.emplace(l, 0);
    int next = 0;
    for (auto& [label, id] : ids) id = next++;
    Clusters c;
    c.sizes.assign(ids.size(), 0);
    c.index.reserve(labels.size());
    for (int l : labels) {
        c.index.push_back(ids[l]);
        ++c.sizes[static_cast<std::size_t>(ids[l])];
    }
    if (c.sizes.size() < 2) throw Error(ErrorCode::undefined_metric, "clustering metrics need at least two clusters");
    return c;
}

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return std::sqrt(s);
}

Matrix centroids(const Matrix& x, const Clusters& c) {
    const std::size_t k = c.sizes.size();
    std::vector<std::vector<CompensatedSum>> sums(k, std::vector<CompensatedSum>(x.cols()));
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = x.row(i);
        auto& s = sums[static_cast<std::size_t>(c.index[i])];
        for (std::size_t j = 0; j < x.cols(); ++j) s[j].add(row[j]);
    }
    Matrix out(k, x.cols());
    for (std::size_t q = 0; q < k; ++q)
        for (std::size_t j = 0; j < x.cols(); ++j) out(q, j) = sums[q][j].value() / static_cast<double>(c.sizes[q]);
    return out;
}

}  // namespace

double silhouette(const Matrix& x, std::span<const int> labels) {
    const Clusters c = compact(x, labels);
    const std::size_t n = x.rows();
    const std::size_t k = c.sizes.size();
    std::vector<double> s(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        const auto own = static_cast<std::size_t>(c.index[i]);
        if (c.sizes[own] == 1) return;
        std::vector<CompensatedSum> sums(k);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sums[static_cast<std::size_t>(c.index[j])].add(distance(x.row(i), x.row(j)));
        const double a = sums[own].value() / static_cast<double>(c.sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < k; ++q)
            if (q != own) b = std::min(b, sums[q].value() / static_cast<double>(c.sizes[q]));
        const double denom = std::max(a, b);
        s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
    });
    CompensatedSum total;
    for (double v : s) total.add(v);
    return total.value() / static_cast<double>(n);
}

double davies_bouldin(const Matrix& x, std::span<const int> labels) {
    const Clusters c = compact(x, labels);
    const std::size_t k = c.sizes.size();
    const Matrix mu = centroids(x, c);
    std::vector<CompensatedSum> scatter_sum(k);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto q = static_cast<std::size_t>(c.index[i]);
        scatter_sum[q].add(distance(x.row(i), mu.row(q)));
    }
    std::vector<double> scatter(k);
    for (std::size_t q = 0; q < k; ++q) scatter[q] = scatter_sum[q].value() / static_cast<double>(c.sizes[q]);

    CompensatedSum total;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            const double m = distance(mu.row(i), mu.row(j));
            const double num = scatter[i] + scatter[j];
            double ratio = 0.0;
            if (m == 0.0) {
                if (num != 0.0)
                    throw Error(ErrorCode::undefined_metric, "Davies-Bouldin: coincident centroids with nonzero scatter");
            } else {
                ratio = num / m;
            }
            worst = std::max(worst, ratio);
        }
        total.add(worst);
    }
    return total.value() / static_cast<double>(k);
}

CalinskiHarabasz calinski_harabasz(const Matrix& x, std::span<const int> labels) {
    const Clusters c = compact(x, labels);
    const std::size_t n = x.rows();
    const std::size_t k = c.sizes.size();
    if (n <= k) throw Error(ErrorCode::undefined_metric, "Calinski-Harabasz needs more samples than clusters");
    const Matrix mu = centroids(x, c);
    std::vector<CompensatedSum> grand(x.cols());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) grand[j].add(x(i, j));
    std::vector<double> g(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) g[j] = grand[j].value() / static_cast<double>(n);

    CompensatedSum between, within;
    for (std::size_t q = 0; q < k; ++q) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) d2 += (mu(q, j) - g[j]) * (mu(q, j) - g[j]);
        between.add(static_cast<double>(c.sizes[q]) * d2);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto q = static_cast<std::size_t>(c.index[i]);
        double d2 = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) d2 += (x(i, j) - mu(q, j)) * (x(i, j) - mu(q, j));
        within.add(d2);
    }
    CalinskiHarabasz out;
    if (within.value() == 0.0) {
        out.value = std::numeric_limits<double>::infinity();
        out.infinite = true;
        return out;
    }
    out.value = (between.value() / static_cast<double>(k - 1)) / (within.value() / static_cast<double>(n - k));
    return out;
}

ClusterMetricsReport cluster_metrics(const Matrix& x, std::span<const int> labels, std::optional<std::size_t> sample,
                                     std::uint64_t seed) {
    if (sample && *sample < x.rows()) {
        std::vector<std::size_t> rows(x.rows());
        std::iota(rows.begin(), rows.end(), 0);
        Rng rng(seed);
        rng.shuffle(rows);
        rows.resize(*sample);
        std::sort(rows.begin(), rows.end());
        std::vector<int> sub_labels;
        for (auto r : rows) sub_labels.push_back(labels[r]);
        return cluster_metrics(x.select_rows(rows), sub_labels, std::nullopt, seed);
    }
    ClusterMetricsReport r;
    r.n = x.rows();
    r.k = compact(x, labels).sizes.size();
    r.silhouette = silhouette(x, labels);
    r.davies_bouldin = davies_bouldin(x, labels);
    const auto ch = calinski_harabasz(x, labels);
    r.calinski_harabasz = ch.value;
    r.calinski_harabasz_infinite = ch.infinite;
    return r;
}

double roc_auc_binary(std::span<const int> y_true, std::span<const double> scores) {
    if (y_true.size() != scores.size()) throw Error(ErrorCode::dimension_mismatch, "labels and scores differ in length");
    const std::size_t n = y_true.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    double n_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t)
            if (y_true[order[t]] == 1) {
                pos_rank_sum += avg_rank;
                n_pos += 1.0;
            }
        i = j;
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0)
        throw Error(ErrorCode::undefined_metric, "AUC needs both positive and negative samples");
    return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

OvrAuc roc_auc_ovr(std::span<const int> y_true, const Matrix& scores, Averaging averaging) {
    if (scores.rows() != y_true.size()) throw Error(ErrorCode::dimension_mismatch, "labels and scores differ in length");
    const std::size_t k = scores.cols();
    OvrAuc out;
    out.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
    CompensatedSum acc;
    double weight_total = 0.0;
    std::vector<int> y(y_true.size());
    std::vector<double> col(y_true.size());
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t support = 0;
        for (std::size_t i = 0; i < y_true.size(); ++i) {
            y[i] = y_true[i] == static_cast<int>(c) ? 1 : 0;
            support += static_cast<std::size_t>(y[i]);
            col[i] = scores(i, c);
        }
        if (support == 0 || support == y_true.size()) {
            out.skipped_classes.push_back(static_cast<int>(c));
            continue;
        }
        const double auc = roc_auc_binary(y, col);
        out.per_class[c] = auc;
        const double w = averaging == Averaging::macro ? 1.0 : static_cast<double>(support);
        acc.add(w * auc);
        weight_total += w;
    }
    if (weight_total == 0.0) throw Error(ErrorCode::undefined_metric, "no class has both positives and negatives");
    out.value = acc.value() / weight_total;
    return out;
}

double top_k_accuracy(std::span<const int> y_true, const Matrix& scores, int k) {
    if (scores.rows() != y_true.size()) throw Error(ErrorCode::dimension_mismatch, "labels and scores differ in length");
    if (k < 1) throw Error(ErrorCode::config, "top-k needs k >= 1");
    if (y_true.empty()) throw Error(ErrorCode::undefined_metric, "top-k accuracy of an empty set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const int t = y_true[i];
        if (t < 0 || static_cast<std::size_t>(t) >= scores.cols()) continue;
        const double st = scores(i, static_cast<std::size_t>(t));
        int rank = 0;
        for (std::size_t j = 0; j < scores.cols(); ++j) {
            const double sj = scores(i, j);
            if (sj > st || (sj == st && static_cast<int>(j) < t)) ++rank;
        }
        if (rank < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

std::vector<std::vector<long>> confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred,
                                                int num_classes) {
    if (y_true.size() != y_pred.size()) throw Error(ErrorCode::dimension_mismatch, "y_true and y_pred differ in length");
    std::vector<std::vector<long>> m(static_cast<std::size_t>(num_classes),
                                     std::vector<long>(static_cast<std::size_t>(num_classes), 0));
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] < 0 || y_true[i] >= num_classes || y_pred[i] < 0 || y_pred[i] >= num_classes)
            throw Error(ErrorCode::config, "class label outside [0, " + std::to_string(num_classes) + ")");
        ++m[static_cast<std::size_t>(y_true[i])][static_cast<std::size_t>(y_pred[i])];
    }
    return m;
}

ClassificationReport classification_report(std::span<const int> y_true, std::span<const int> y_pred, int num_classes,
                                           const Matrix* scores, const ReportOptions& options) {
    if (y_true.empty()) throw Error(ErrorCode::undefined_metric, "classification report of an empty set");
    ClassificationReport r;
    r.num_classes = num_classes;
    r.n = y_true.size();
    r.confusion = confusion_matrix(y_true, y_pred, num_classes);
    const auto k = static_cast<std::size_t>(num_classes);
    long trace = 0;
    std::vector<long> predicted(k, 0);
    for (std::size_t a = 0; a < k; ++a) {
        trace += r.confusion[a][a];
        for (std::size_t b = 0; b < k; ++b) predicted[b] += r.confusion[a][b];
    }
    r.accuracy = static_cast<double>(trace) / static_cast<double>(r.n);

    r.per_class.resize(k);
    CompensatedSum mp, mr, mf, wp, wr, wf;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
        auto& m = r.per_class[c];
        const long tp = r.confusion[c][c];
        for (std::size_t b = 0; b < k; ++b) m.support += r.confusion[c][b];
        if (m.support == 0 && predicted[c] == 0) continue;
        ++present;
        if (predicted[c] > 0)
            m.precision = static_cast<double>(tp) / static_cast<double>(predicted[c]);
        else
            r.zero_division = true;
        if (m.support > 0)
            m.recall = static_cast<double>(tp) / static_cast<double>(m.support);
        else
            r.zero_division = true;
        if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        mp.add(m.precision);
        mr.add(m.recall);
        mf.add(m.f1);
        const double w = static_cast<double>(m.support);
        wp.add(w * m.precision);
        wr.add(static_cast<double>(tp));
        wf.add(w * m.f1);
    }
    const double pc = static_cast<double>(present);
    const double nn = static_cast<double>(r.n);
    r.macro_precision = mp.value() / pc;
    r.macro_recall = mr.value() / pc;
    r.macro_f1 = mf.value() / pc;
    r.weighted_precision = wp.value() / nn;
    r.weighted_recall = wr.value() / nn;
    r.weighted_f1 = wf.value() / nn;

    if (options.want_auc || options.top_k > 0) {
        if (scores == nullptr) throw Error(ErrorCode::config, "scores are required for AUC and top-k metrics");
        if (scores->rows() != r.n) throw Error(ErrorCode::dimension_mismatch, "score rows differ from label count");
    }
    if (options.want_auc) {
        if (num_classes == 2 && scores->cols() <= 2) {
            std::vector<double> pos(r.n);
            for (std::size_t i = 0; i < r.n; ++i) pos[i] = (*scores)(i, scores->cols() - 1);
            r.roc_auc = roc_auc_binary(y_true, pos);
        } else {
            auto macro = roc_auc_ovr(y_true, *scores, Averaging::macro);
            r.roc_auc_ovr_macro = macro.value;
            r.roc_auc_ovr_weighted = roc_auc_ovr(y_true, *scores, Averaging::weighted).value;
            r.auc_skipped_classes = macro.skipped_classes;
        }
    }
    if (options.top_k > 0) {
        r.top_k = options.top_k;
        r.top_k_accuracy = top_k_accuracy(y_true, *scores, options.top_k);
    }
    return r;
}

nlohmann::json to_json(const ClusterMetricsReport& r) {
    nlohmann::json j;
    j["silhouette"] = r.silhouette;
    j["davies_bouldin"] = r.davies_bouldin;
    j["calinski_harabasz"] = r.calinski_harabasz_infinite ? nlohmann::json("inf") : nlohmann::json(r.calinski_harabasz);
    j["calinski_harabasz_infinite"] = r.calinski_harabasz_infinite;
    j["n"] = r.n;
    j["k"] = r.k;
    return j;
}

nlohmann::json to_json(const ClassificationReport& r) {
    nlohmann::json j;
    j["n"] = r.n;
    j["num_classes"] = r.num_classes;
    j["accuracy"] = r.accuracy;
    j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
    j["weighted"] = {{"precision", r.weighted_precision}, {"recall", r.weighted_recall}, {"f1", r.weighted_f1}};
    j["zero_division"] = r.zero_division;
    auto& pc = j["per_class"] = nlohmann::json::array();
    for (const auto& m : r.per_class)
        pc.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}});
    j["confusion"] = r.confusion;
    if (r.roc_auc) j["roc_auc"] = *r.roc_auc;
    if (r.roc_auc_ovr_macro) {
        j["roc_auc_ovr_macro"] = *r.roc_auc_ovr_macro;
        j["roc_auc_ovr_weighted"] = *r.roc_auc_ovr_weighted;
        j["auc_skipped_classes"] = r.auc_skipped_classes;
    }
    if (r.top_k_accuracy) {
        j["top_k"] = r.top_k;
        j["top_k_accuracy"] = *r.top_k_accuracy;
    }
    return j;
}

}  // namespace malsim::metrics
