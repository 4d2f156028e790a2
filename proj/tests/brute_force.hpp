#pragma once

// Textbook definitions evaluated directly with plain loops, kept apart from
// the library code they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "malsim/common.hpp"

namespace brute {

using malsim::Matrix;

inline double dist(const Matrix& x, std::size_t i, const std::vector<double>& c) {
    double s = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += (x(i, j) - c[j]) * (x(i, j) - c[j]);
    return std::sqrt(s);
}

inline std::vector<double> row_vec(const Matrix& x, std::size_t i) { return {x.row(i).begin(), x.row(i).end()}; }

inline double silhouette(const Matrix& x, const std::vector<int>& y) {
    const std::size_t n = x.rows();
    std::map<int, std::size_t> size;
    for (int l : y) ++size[l];
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (size[y[i]] == 1) continue;
        std::map<int, double> sum;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) sum[y[j]] += dist(x, i, row_vec(x, j));
        const double a = sum[y[i]] / static_cast<double>(size[y[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (auto& [l, s] : sum)
            if (l != y[i]) b = std::min(b, s / static_cast<double>(size[l]));
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

inline std::map<int, std::vector<double>> centroids(const Matrix& x, const std::vector<int>& y) {
    std::map<int, std::vector<double>> c;
    std::map<int, double> count;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto& v = c[y[i]];
        v.resize(x.cols(), 0.0);
        for (std::size_t j = 0; j < x.cols(); ++j) v[j] += x(i, j);
        count[y[i]] += 1;
    }
    for (auto& [l, v] : c)
        for (double& e : v) e /= count[l];
    return c;
}

inline double davies_bouldin(const Matrix& x, const std::vector<int>& y) {
    auto c = centroids(x, y);
    std::map<int, double> s, count;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        s[y[i]] += dist(x, i, c[y[i]]);
        count[y[i]] += 1;
    }
    for (auto& [l, v] : s) v /= count[l];
    double total = 0;
    for (auto& [i, ci] : c) {
        double worst = 0;
        for (auto& [j, cj] : c) {
            if (i == j) continue;
            double m = 0;
            for (std::size_t d = 0; d < ci.size(); ++d) m += (ci[d] - cj[d]) * (ci[d] - cj[d]);
            worst = std::max(worst, (s[i] + s[j]) / std::sqrt(m));
        }
        total += worst;
    }
    return total / static_cast<double>(c.size());
}

inline double calinski_harabasz(const Matrix& x, const std::vector<int>& y) {
    auto c = centroids(x, y);
    std::vector<double> g(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) g[j] += x(i, j) / static_cast<double>(x.rows());
    std::map<int, double> count;
    for (int l : y) count[l] += 1;
    double b = 0, w = 0;
    for (auto& [l, v] : c)
        for (std::size_t j = 0; j < x.cols(); ++j) b += count[l] * (v[j] - g[j]) * (v[j] - g[j]);
    for (std::size_t i = 0; i < x.rows(); ++i) w += std::pow(dist(x, i, c[y[i]]), 2);
    const double n = static_cast<double>(x.rows()), k = static_cast<double>(c.size());
    return (b / (k - 1)) / (w / (n - k));
}

// Every positive/negative pair compared, ties worth one half.
inline double pair_auc(const std::vector<int>& y, const std::vector<double>& s) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j)
            if (y[i] == 1 && y[j] != 1) {
                wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
                pairs += 1;
            }
    return wins / pairs;
}

// Area under the ROC step curve built from descending thresholds.
inline double trapezoid_auc(const std::vector<int>& y, const std::vector<double>& s) {
    std::vector<std::size_t> order(y.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    double pos = 0, neg = 0;
    for (int v : y) (v == 1 ? pos : neg) += 1;
    double tp = 0, area = 0;
    for (std::size_t i = 0; i < order.size();) {
        double dtp = 0, dfp = 0;
        std::size_t j = i;
        while (j < order.size() && s[order[j]] == s[order[i]]) (y[order[j++]] == 1 ? dtp : dfp) += 1;
        area += (dfp / neg) * (tp + tp + dtp) / (2 * pos);
        tp += dtp;
        i = j;
    }
    return area;
}

struct Homogeneity {
    double benign_mean = 0, malicious_mean = 0, all_mean = 0, all_std = 0;
};

// Euclidean K-NN by full sort with id tie-break, then label matches per query.
inline Homogeneity homogeneity(const Matrix& x, const std::vector<int>& y, const std::vector<std::string>& ids,
                               std::size_t k) {
    std::vector<double> counts(x.rows());
    double b = 0, m = 0, nb = 0, nm = 0;
    for (std::size_t q = 0; q < x.rows(); ++q) {
        std::vector<std::pair<double, std::string>> d;
        std::map<std::string, int> label;
        for (std::size_t j = 0; j < x.rows(); ++j) {
            if (j == q) continue;
            d.emplace_back(dist(x, q, row_vec(x, j)), ids[j]);
            label[ids[j]] = y[j];
        }
        std::sort(d.begin(), d.end());
        double c = 0;
        for (std::size_t r = 0; r < k; ++r) c += label[d[r].second] == y[q] ? 1 : 0;
        counts[q] = c;
        (y[q] == 1 ? m : b) += c;
        (y[q] == 1 ? nm : nb) += 1;
    }
    Homogeneity h;
    h.benign_mean = nb > 0 ? b / nb : 0;
    h.malicious_mean = nm > 0 ? m / nm : 0;
    h.all_mean = (b + m) / static_cast<double>(x.rows());
    double v = 0;
    for (double c : counts) v += (c - h.all_mean) * (c - h.all_mean);
    h.all_std = std::sqrt(v / static_cast<double>(x.rows()));
    return h;
}

}  // namespace brute
