#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "malsim/similarity.hpp"

namespace malsim::similarity {

std::string_view kind_name(EmbeddingKind k) { return k == EmbeddingKind::continuous ? "continuous" : "leaf_index"; }

EmbeddingKind kind_from_name(std::string_view name) {
    if (name == "continuous") return EmbeddingKind::continuous;
    if (name == "leaf_index") return EmbeddingKind::leaf_index;
    throw Error(ErrorCode::config, "unknown embedding kind '" + std::string(name) + "'");
}

std::string_view metric_name(Metric m) { return m == Metric::euclidean ? "euclidean" : "leaf-overlap"; }

Metric metric_from_name(std::string_view name) {
    if (name == "euclidean") return Metric::euclidean;
    if (name == "leaf-overlap" || name == "leaf_overlap") return Metric::leaf_overlap;
    throw Error(ErrorCode::config, "unknown metric '" + std::string(name) + "'");
}

void EmbeddingSet::validate() const {
    const std::size_t n = ids.size();
    if (vectors.rows() != n || labels_binary.size() != n || (!labels_family.empty() && labels_family.size() != n))
        throw Error(ErrorCode::dimension_mismatch, "embedding set columns have different lengths");
    std::set<std::string_view> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw Error(ErrorCode::config, "duplicate embedding id " + id);
    if (kind == EmbeddingKind::leaf_index)
        for (double v : vectors.data())
            if (v != std::floor(v) || !std::isfinite(v))
                throw Error(ErrorCode::kind_mismatch, "leaf-index embedding holds a non-integer value");
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "vectors differ in dimension");
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return std::sqrt(s);
}

namespace {

template <typename T>
double overlap(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "leaf vectors differ in tree count");
    if (a.empty()) throw Error(ErrorCode::dimension_mismatch, "leaf vectors are empty");
    std::size_t same = 0;
    for (std::size_t t = 0; t < a.size(); ++t) same += a[t] == b[t] ? 1 : 0;
    return 1.0 - static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace

double leaf_overlap_distance(std::span<const double> a, std::span<const double> b) { return overlap(a, b); }
double leaf_overlap_distance(std::span<const int> a, std::span<const int> b) { return overlap(a, b); }

BruteForceIndex::BruteForceIndex(std::shared_ptr<const EmbeddingSet> set, Metric metric)
    : set_(std::move(set)), metric_(metric) {
    if (!set_ || set_->size() < 2) throw Error(ErrorCode::config, "an index needs at least two embeddings");
    set_->validate();
    if (metric_ == Metric::leaf_overlap && set_->kind != EmbeddingKind::leaf_index)
        throw Error(ErrorCode::kind_mismatch, "leaf-overlap distance requires a leaf-index embedding set");
    for (std::size_t i = 0; i < set_->size(); ++i) row_of_.emplace(set_->ids[i], i);
}

double BruteForceIndex::distance(std::span<const double> a, std::span<const double> b) const {
    return metric_ == Metric::euclidean ? euclidean_distance(a, b) : leaf_overlap_distance(a, b);
}

std::vector<Neighbor> BruteForceIndex::search(std::span<const double> v, std::optional<std::size_t> skip,
                                              std::size_t k, bool warn) const {
    if (k < 1) throw Error(ErrorCode::config, "K must be at least 1");
    const auto& s = *set_;
    const std::size_t candidates = s.size() - (skip ? 1 : 0);
    if (k > candidates) {
        if (warn) log_warning("K=" + std::to_string(k) + " exceeds " + std::to_string(candidates) + " candidates; clamped");
        k = candidates;
    }
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(candidates);
    for (std::size_t j = 0; j < s.size(); ++j)
        if (!skip || j != *skip) d.emplace_back(distance(v, s.vectors.row(j)), j);
    auto less = [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return s.ids[a.second] < s.ids[b.second];
    };
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end(), less);
    std::vector<Neighbor> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({d[i].second, s.ids[d[i].second], d[i].first});
    return out;
}

std::vector<Neighbor> BruteForceIndex::query_row(std::size_t row, std::size_t k, bool exclude_self) const {
    if (row >= set_->size()) throw Error(ErrorCode::unknown_id, "row " + std::to_string(row) + " outside the index");
    return search(set_->vectors.row(row), exclude_self ? std::optional(row) : std::nullopt, k, true);
}

std::vector<Neighbor> BruteForceIndex::query_id(const std::string& id, std::size_t k, bool exclude_self) const {
    auto it = row_of_.find(id);
    if (it == row_of_.end()) throw Error(ErrorCode::unknown_id, "unknown embedding id " + id);
    return query_row(it->second, k, exclude_self);
}

std::vector<Neighbor> BruteForceIndex::query_vector(std::span<const double> v, std::size_t k) const {
    if (v.size() != set_->dimension()) throw Error(ErrorCode::dimension_mismatch, "query vector dimension differs");
    return search(v, std::nullopt, k, true);
}

MatchCounts match_counts(const BruteForceIndex& index, std::span<const std::size_t> ks, LabelField field,
                         std::optional<std::size_t> sample, std::uint64_t seed) {
    const auto& s = index.set();
    const std::size_t n = s.size();
    if (ks.empty()) throw Error(ErrorCode::config, "K list is empty");
    const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
    if (*std::min_element(ks.begin(), ks.end()) < 1) throw Error(ErrorCode::config, "K must be at least 1");
    if (n <= kmax)
        throw Error(ErrorCode::config, "Label-Homogeneity@" + std::to_string(kmax) + " needs more than " +
                                           std::to_string(kmax) + " embeddings, got " + std::to_string(n));
    if (field == LabelField::family && s.labels_family.empty())
        throw Error(ErrorCode::config, "embedding set has no family labels");
    const std::vector<int>& label = field == LabelField::binary ? s.labels_binary : s.labels_family;

    MatchCounts mc;
    for (std::size_t i = 0; i < n; ++i)
        if (field == LabelField::binary || label[i] >= 0) mc.query_rows.push_back(i);
    if (sample && *sample < mc.query_rows.size()) {
        Rng rng(seed);
        rng.shuffle(mc.query_rows);
        mc.query_rows.resize(*sample);
        std::sort(mc.query_rows.begin(), mc.query_rows.end());
    }
    mc.counts.assign(mc.query_rows.size(), std::vector<int>(ks.size(), 0));
    parallel_for(mc.query_rows.size(), [&](std::size_t q) {
        const std::size_t row = mc.query_rows[q];
        const auto nb = index.query_row(row, kmax, true);
        std::vector<int> prefix(kmax + 1, 0);
        for (std::size_t r = 0; r < kmax; ++r) {
            const int l = label[nb[r].row];
            prefix[r + 1] = prefix[r] + ((l == label[row] && l >= 0) ? 1 : 0);
        }
        for (std::size_t t = 0; t < ks.size(); ++t) mc.counts[q][t] = prefix[ks[t]];
    });
    return mc;
}

namespace {

GroupStats group_stats(const std::vector<double>& values) {
    GroupStats g;
    g.count = values.size();
    if (values.empty()) return g;
    CompensatedSum sum;
    for (double v : values) sum.add(v);
    g.mean = sum.value() / static_cast<double>(values.size());
    CompensatedSum sq;
    for (double v : values) sq.add((v - g.mean) * (v - g.mean));
    g.std = std::sqrt(sq.value() / static_cast<double>(values.size()));
    return g;
}

}  // namespace

HomogeneityReport label_homogeneity_at_k(const BruteForceIndex& index, std::span<const std::size_t> ks,
                                         LabelField field, std::optional<std::size_t> sample, std::uint64_t seed) {
    const auto mc = match_counts(index, ks, field, sample, seed);
    const auto& s = index.set();
    HomogeneityReport r;
    r.source = s.source;
    r.metric = index.metric();
    r.label_field = field;
    r.n = s.size();
    r.queries = mc.query_rows.size();
    for (std::size_t t = 0; t < ks.size(); ++t) {
        std::vector<double> benign, malicious, all;
        for (std::size_t q = 0; q < mc.query_rows.size(); ++q) {
            const double c = mc.counts[q][t];
            (s.labels_binary[mc.query_rows[q]] == 1 ? malicious : benign).push_back(c);
            all.push_back(c);
        }
        r.rows.push_back({ks[t], group_stats(benign), group_stats(malicious), group_stats(all)});
    }
    return r;
}

nlohmann::json to_json(const HomogeneityReport& r) {
    auto group = [](const GroupStats& g) { return nlohmann::json{{"mean", g.mean}, {"std", g.std}, {"count", g.count}}; };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"k", row.k}, {"benign", group(row.benign)}, {"malicious", group(row.malicious)},
                        {"all", group(row.all)}});
    return {{"source", r.source},
            {"metric", metric_name(r.metric)},
            {"label_field", r.label_field == LabelField::binary ? "binary" : "family"},
            {"n", r.n},
            {"queries", r.queries},
            {"rows", rows}};
}

std::string homogeneity_csv(const HomogeneityReport& r, const std::string& title) {
    std::ostringstream out;
    out << "# " << title << '\n';
    out << "K,Benign Mean,Benign Std,Malicious Mean,Malicious Std,All Mean,All Std\n";
    for (const auto& row : r.rows) {
        out << row.k;
        for (const auto* g : {&row.benign, &row.malicious, &row.all})
            out << ',' << format_decimals(g->mean, 4) << ',' << format_decimals(g->std, 4);
        out << '\n';
    }
    return out.str();
}

namespace {

std::filesystem::path sidecar_for(const std::filesystem::path& csv) {
    auto p = csv;
    p.replace_extension(".json");
    return p;
}

}  // namespace

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& csv_path, Metric metric_default) {
    set.validate();
    std::ofstream out(csv_path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + csv_path.string());
    out << "id,label,family";
    for (std::size_t j = 0; j < set.dimension(); ++j) out << ",e" << j;
    out << '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        out << csv_field(set.ids[i]) << ',' << set.labels_binary[i] << ','
            << (set.labels_family.empty() ? -1 : set.labels_family[i]);
        for (double v : set.vectors.row(i)) out << ',' << format_fixed(v);
        out << '\n';
    }
    nlohmann::json side{{"kind", kind_name(set.kind)},
                        {"source", set.source},
                        {"d", set.dimension()},
                        {"n", set.size()},
                        {"has_family", !set.labels_family.empty()},
                        {"metric_default", metric_name(metric_default)}};
    std::ofstream js(sidecar_for(csv_path));
    if (!js) throw Error(ErrorCode::io, "cannot write " + sidecar_for(csv_path).string());
    js << side.dump(2) << '\n';
}

EmbeddingSet read_embeddings(const std::filesystem::path& csv_path, Metric* metric_default) {
    std::ifstream side_in(sidecar_for(csv_path));
    if (!side_in) throw Error(ErrorCode::missing_artifact, "missing embedding sidecar " + sidecar_for(csv_path).string());
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(side_in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::io, "malformed embedding sidecar: " + std::string(e.what()));
    }
    std::ifstream in(csv_path);
    if (!in) throw Error(ErrorCode::missing_artifact, "missing embedding file " + csv_path.string());
    EmbeddingSet set;
    set.kind = kind_from_name(side.at("kind").get<std::string>());
    set.source = side.at("source").get<std::string>();
    if (metric_default) *metric_default = metric_from_name(side.at("metric_default").get<std::string>());
    const auto d = side.at("d").get<std::size_t>();
    const bool has_family = side.value("has_family", true);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::io, csv_path.string() + " is empty");
    if (split_csv_line(line).size() != d + 3) throw Error(ErrorCode::io, csv_path.string() + ": header disagrees with sidecar");
    std::vector<double> values;
    const std::string ctx = csv_path.string();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != d + 3) throw Error(ErrorCode::io, ctx + ": ragged row for id " + f[0]);
        set.ids.push_back(f[0]);
        set.labels_binary.push_back(static_cast<int>(parse_csv_double(f[1], ctx)));
        if (has_family) set.labels_family.push_back(static_cast<int>(parse_csv_double(f[2], ctx)));
        for (std::size_t j = 0; j < d; ++j) values.push_back(parse_csv_double(f[3 + j], ctx));
    }
    set.vectors = Matrix(set.ids.size(), d);
    set.vectors.data() = std::move(values);
    set.validate();
    return set;
}

}  // namespace malsim::similarity
