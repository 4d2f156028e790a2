#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "malsim/features.hpp"

namespace malsim::features {

using nlohmann::json;

std::optional<std::size_t> Vocabulary::lookup(const std::string& token) const {
    auto it = token_to_index.find(token);
    if (it == token_to_index.end()) return std::nullopt;
    return it->second;
}

Vocabulary Vocabulary::from_tokens(std::string field_name, std::vector<std::string> tokens, std::size_t cap) {
    Vocabulary v;
    v.field_name = std::move(field_name);
    v.cap = cap;
    v.tokens = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) v.token_to_index.emplace(v.tokens[i], i);
    return v;
}

const std::vector<std::string>& bow_tokens(const RawRecord& record, std::string_view field_name) {
    if (field_name == "imports") return record.imports;
    if (field_name == "exports") return record.exports;
    if (field_name == "section_properties") return record.section_properties;
    throw Error(ErrorCode::config, "unknown bag-of-words field '" + std::string(field_name) + "'");
}

std::vector<std::string> rank_by_frequency(const std::map<std::string, std::size_t>& counts) {
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    // counts is already lexicographic, so a stable sort on frequency keeps the tie order.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> out;
    out.reserve(ranked.size());
    for (auto& [token, n] : ranked) out.push_back(token);
    return out;
}

Vocabulary build_vocabulary(std::span<const RawRecord> records, std::string_view field_name, std::size_t cap) {
    static const RawRecord probe;
    (void)bow_tokens(probe, field_name);

    std::map<std::string, std::size_t> counts;
    for (const auto& r : records)
        for (const auto& t : bow_tokens(r, field_name)) ++counts[t];
    auto ranked = rank_by_frequency(counts);
    if (ranked.size() > cap) ranked.resize(cap);
    return Vocabulary::from_tokens(std::string(field_name), std::move(ranked), cap);
}

const Block& FeatureLayout::block(std::string_view name) const {
    for (const auto& b : blocks)
        if (b.name == name) return b;
    throw Error(ErrorCode::config, "layout has no block '" + std::string(name) + "'");
}

FeatureLayout make_layout(const LayoutConfig& config, const Vocabularies& vocabs) {
    FeatureLayout layout;
    auto add = [&](std::string name, std::size_t size) {
        layout.blocks.push_back({std::move(name), layout.dimension, size});
        layout.dimension += size;
    };
    add("histogram", config.histogram_dim);
    add("byteentropy", config.byteentropy_dim);
    add("printabledist", config.printabledist_dim);
    add("imports", vocabs.imports.size());
    add("exports", vocabs.exports.size());
    add("sections", vocabs.sections.size());
    add("header", config.header_fields.size());
    return layout;
}

namespace {

void check_length(const std::vector<double>& v, std::size_t expected, std::string_view name,
                  const RawRecord& record) {
    if (v.size() != expected)
        throw Error(ErrorCode::vectorization, "record " + record.sha256 + ": " + std::string(name) + " has " +
                                                  std::to_string(v.size()) + " entries, layout expects " +
                                                  std::to_string(expected));
}

void fill_bow(const std::vector<std::string>& tokens, const Vocabulary& vocab, bool binarize, double* block) {
    for (const auto& t : tokens)
        if (auto idx = vocab.lookup(t)) block[*idx] = binarize ? 1.0 : block[*idx] + 1.0;
}

}  // namespace

FeatureVector vectorize(const RawRecord& record, const Vocabularies& vocabs, const LayoutConfig& config) {
    check_length(record.histogram, config.histogram_dim, "histogram", record);
    check_length(record.byteentropy, config.byteentropy_dim, "byteentropy", record);
    check_length(record.printabledist, config.printabledist_dim, "printabledist", record);

    const FeatureLayout layout = make_layout(config, vocabs);
    FeatureVector out(layout.dimension, 0.0);
    auto at = [&](std::string_view block) { return out.data() + layout.block(block).offset; };

    std::copy(record.histogram.begin(), record.histogram.end(), at("histogram"));
    std::copy(record.byteentropy.begin(), record.byteentropy.end(), at("byteentropy"));
    std::copy(record.printabledist.begin(), record.printabledist.end(), at("printabledist"));
    fill_bow(record.imports, vocabs.imports, config.binarize_bow, at("imports"));
    fill_bow(record.exports, vocabs.exports, config.binarize_bow, at("exports"));
    fill_bow(record.section_properties, vocabs.sections, config.binarize_bow, at("sections"));

    double* header = at("header");
    for (std::size_t i = 0; i < config.header_fields.size(); ++i) {
        auto it = record.header_fields.find(config.header_fields[i]);
        header[i] = it == record.header_fields.end() ? 0.0 : it->second;
    }
    return out;
}

std::vector<std::string> collect_header_fields(std::span<const RawRecord> records) {
    std::set<std::string> names;
    for (const auto& r : records)
        for (const auto& [k, v] : r.header_fields) names.insert(k);
    return {names.begin(), names.end()};
}

NormStats fit_normalizer(const Matrix& x_train, double epsilon) {
    if (x_train.rows() == 0) throw Error(ErrorCode::config, "cannot fit normalizer on an empty training set");
    const std::size_t n = x_train.rows(), d = x_train.cols();
    NormStats s;
    s.epsilon = epsilon;
    s.mean.assign(d, 0.0);
    s.std.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        CompensatedSum sum;
        for (std::size_t i = 0; i < n; ++i) sum.add(x_train(i, j));
        const double mean = sum.value() / static_cast<double>(n);
        CompensatedSum sq;
        for (std::size_t i = 0; i < n; ++i) {
            const double dv = x_train(i, j) - mean;
            sq.add(dv * dv);
        }
        s.mean[j] = mean;
        s.std[j] = std::sqrt(sq.value() / static_cast<double>(n));
    }
    return s;
}

Matrix apply_normalizer(const NormStats& stats, const Matrix& x) {
    if (x.cols() != stats.mean.size())
        throw Error(ErrorCode::dimension_mismatch, "normalizer fitted on " + std::to_string(stats.mean.size()) +
                                                       " columns applied to " + std::to_string(x.cols()));
    Matrix out(x.rows(), x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        const double div = stats.divisor(j);
        for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = (x(i, j) - stats.mean[j]) / div;
    }
    return out;
}

std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_name(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw Error(ErrorCode::config, "unknown split '" + std::string(name) + "'");
}

std::vector<std::size_t> LabeledDataset::rows_in(Split s) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) rows.push_back(i);
    return rows;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
    LabeledDataset out;
    out.family_names = family_names;
    out.X = X.select_rows(rows);
    for (std::size_t r : rows) {
        out.ids.push_back(ids[r]);
        out.y_binary.push_back(y_binary[r]);
        if (!y_family.empty()) out.y_family.push_back(y_family[r]);
        if (!split.empty()) out.split.push_back(split[r]);
    }
    return out;
}

std::vector<Split> stratified_assignment(std::span<const int> classes, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error(ErrorCode::config, "train_fraction must lie in (0, 1)");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < classes.size(); ++i) members[classes[i]].push_back(i);

    std::vector<Split> out(classes.size(), Split::test);
    Rng rng(seed);
    for (auto& [cls, rows] : members) {
        rng.shuffle(rows);
        const auto n_train = static_cast<std::size_t>(std::lround(static_cast<double>(rows.size()) * train_fraction));
        for (std::size_t k = 0; k < n_train && k < rows.size(); ++k) out[rows[k]] = Split::train;
    }
    return out;
}

LabeledDataset stratified_split(const LabeledDataset& dataset, double train_fraction, std::uint64_t seed,
                                StratifyBy by) {
    if (by == StratifyBy::binary) {
        LabeledDataset out = dataset;
        out.split = stratified_assignment(out.y_binary, train_fraction, seed);
        return out;
    }
    if (dataset.y_family.empty()) throw Error(ErrorCode::config, "family stratification requires family labels");
    std::map<int, std::size_t> counts;
    for (int f : dataset.y_family) ++counts[f];
    std::vector<std::size_t> keep;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int f = dataset.y_family[i];
        if (f >= 0 && counts[f] >= 2)
            keep.push_back(i);
        else
            ++dropped;
    }
    if (dropped > 0)
        log_warning("family stratification dropped " + std::to_string(dropped) +
                    " rows from families with fewer than 2 members or no family");
    LabeledDataset out = dataset.subset(keep);
    out.split = stratified_assignment(out.y_family, train_fraction, seed);
    return out;
}

LabeledDataset filter_top_n_families(const LabeledDataset& dataset, std::size_t n) {
    if (dataset.y_family.empty()) throw Error(ErrorCode::config, "dataset has no family labels");
    std::map<std::string, std::size_t> counts;
    for (int f : dataset.y_family)
        if (f >= 0) ++counts[dataset.family_names.at(static_cast<std::size_t>(f))];
    auto ranked = rank_by_frequency(counts);
    if (ranked.size() < n)
        log_warning("only " + std::to_string(ranked.size()) + " distinct families, fewer than top-n " +
                    std::to_string(n) + "; keeping all");
    if (ranked.size() > n) ranked.resize(n);
    std::map<std::string, int> new_index;
    for (std::size_t i = 0; i < ranked.size(); ++i) new_index[ranked[i]] = static_cast<int>(i);

    std::vector<std::size_t> keep;
    std::vector<int> remapped;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int f = dataset.y_family[i];
        if (f < 0) continue;
        auto it = new_index.find(dataset.family_names[static_cast<std::size_t>(f)]);
        if (it == new_index.end()) continue;
        keep.push_back(i);
        remapped.push_back(it->second);
    }
    LabeledDataset out = dataset.subset(keep);
    out.y_family = std::move(remapped);
    out.family_names = std::move(ranked);
    return out;
}

std::vector<double> compute_class_weights(std::span<const int> family_labels, std::size_t n_classes) {
    std::vector<std::size_t> counts(n_classes, 0);
    for (int c : family_labels) {
        if (c < 0 || static_cast<std::size_t>(c) >= n_classes)
            throw Error(ErrorCode::config, "family label " + std::to_string(c) + " outside [0, n_classes)");
        ++counts[static_cast<std::size_t>(c)];
    }
    std::vector<double> w(n_classes, 0.0);
    const double n = static_cast<double>(family_labels.size());
    for (std::size_t c = 0; c < n_classes; ++c)
        if (counts[c] > 0) w[c] = n / (static_cast<double>(n_classes) * static_cast<double>(counts[c]));
    return w;
}

std::vector<double> compute_class_weights(const LabeledDataset& dataset) {
    return compute_class_weights(dataset.y_family, dataset.family_names.size());
}

PreparedDataset prepare_dataset(std::vector<RawRecord> records, const PipelineConfig& config) {
    PreparedDataset p;
    p.config = config;
    p.counts.input_records = records.size();

    CleanStats cs;
    auto cleaned = clean_and_dedup(std::move(records), &cs);
    p.counts.removed_malformed = cs.removed_malformed;
    p.counts.removed_duplicates = cs.removed_duplicates;

    std::vector<RawRecord> labeled;
    labeled.reserve(cleaned.size());
    for (auto& r : cleaned) {
        if (r.label == Label::unknown) {
            ++p.counts.dropped_unknown;
            continue;
        }
        const auto& lc = config.layout;
        if (r.histogram.size() != lc.histogram_dim || r.byteentropy.size() != lc.byteentropy_dim ||
            r.printabledist.size() != lc.printabledist_dim) {
            ++p.counts.rejected_layout;
            continue;
        }
        labeled.push_back(std::move(r));
    }
    if (labeled.empty()) throw Error(ErrorCode::empty_corpus, "no labeled records survive cleaning");

    std::vector<int> y(labeled.size());
    for (std::size_t i = 0; i < labeled.size(); ++i) y[i] = labeled[i].label == Label::malicious ? 1 : 0;
    auto split = stratified_assignment(y, config.train_fraction, config.seed);

    std::vector<RawRecord> train_records;
    for (std::size_t i = 0; i < labeled.size(); ++i)
        if (split[i] == Split::train) train_records.push_back(labeled[i]);

    p.layout = config.layout;
    if (p.layout.header_fields.empty()) p.layout.header_fields = collect_header_fields(train_records);
    p.vocabs.imports = build_vocabulary(train_records, "imports", config.vocab_cap);
    p.vocabs.exports = build_vocabulary(train_records, "exports", config.vocab_cap);
    p.vocabs.sections = build_vocabulary(train_records, "section_properties", config.vocab_cap);
    p.feature_layout = make_layout(p.layout, p.vocabs);

    std::map<std::string, std::size_t> family_counts;
    for (const auto& r : labeled)
        if (r.avclass) ++family_counts[*r.avclass];
    p.data.family_names = rank_by_frequency(family_counts);
    std::map<std::string, int> family_index;
    for (std::size_t i = 0; i < p.data.family_names.size(); ++i)
        family_index[p.data.family_names[i]] = static_cast<int>(i);

    Matrix raw(labeled.size(), p.feature_layout.dimension);
    std::vector<FeatureVector> rows(labeled.size());
    parallel_for(labeled.size(), [&](std::size_t i) { rows[i] = vectorize(labeled[i], p.vocabs, p.layout); });
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        std::copy(rows[i].begin(), rows[i].end(), raw.row(i).begin());
        p.data.ids.push_back(labeled[i].sha256);
        p.data.y_binary.push_back(y[i]);
        p.data.y_family.push_back(labeled[i].avclass ? family_index[*labeled[i].avclass] : -1);
    }
    p.data.split = split;

    std::vector<std::size_t> train_rows = p.data.rows_in(Split::train);
    p.norm = fit_normalizer(raw.select_rows(train_rows), config.norm_epsilon);
    p.data.X = apply_normalizer(p.norm, raw);
    p.counts.train = train_rows.size();
    p.counts.test = labeled.size() - train_rows.size();
    return p;
}

json to_json(const Vocabulary& v) { return {{"field_name", v.field_name}, {"cap", v.cap}, {"tokens", v.tokens}}; }

Vocabulary vocabulary_from_json(const json& j) {
    return Vocabulary::from_tokens(j.at("field_name").get<std::string>(), j.at("tokens").get<std::vector<std::string>>(),
                                   j.at("cap").get<std::size_t>());
}

json to_json(const LayoutConfig& c) {
    return {{"histogram_dim", c.histogram_dim},
            {"byteentropy_dim", c.byteentropy_dim},
            {"printabledist_dim", c.printabledist_dim},
            {"header_fields", c.header_fields},
            {"binarize_bow", c.binarize_bow}};
}

LayoutConfig layout_config_from_json(const json& j) {
    LayoutConfig c;
    c.histogram_dim = j.value("histogram_dim", c.histogram_dim);
    c.byteentropy_dim = j.value("byteentropy_dim", c.byteentropy_dim);
    c.printabledist_dim = j.value("printabledist_dim", c.printabledist_dim);
    c.header_fields = j.value("header_fields", c.header_fields);
    c.binarize_bow = j.value("binarize_bow", c.binarize_bow);
    return c;
}

json to_json(const NormStats& s) { return {{"mean", s.mean}, {"std", s.std}, {"epsilon", s.epsilon}}; }

NormStats norm_stats_from_json(const json& j) {
    NormStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    s.epsilon = j.at("epsilon").get<double>();
    return s;
}

json manifest_json(const PreparedDataset& p) {
    json blocks = json::array();
    for (const auto& b : p.feature_layout.blocks) blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
    return {
        {"layout_config", to_json(p.layout)},
        {"layout", {{"dimension", p.feature_layout.dimension}, {"blocks", blocks}}},
        {"vocabularies", {to_json(p.vocabs.imports), to_json(p.vocabs.exports), to_json(p.vocabs.sections)}},
        {"norm_stats", to_json(p.norm)},
        {"seed", p.config.seed},
        {"train_fraction", p.config.train_fraction},
        {"vocab_cap", p.config.vocab_cap},
        {"family_names", p.data.family_names},
        {"counts",
         {{"input_records", p.counts.input_records},
          {"removed_malformed", p.counts.removed_malformed},
          {"removed_duplicates", p.counts.removed_duplicates},
          {"dropped_unknown", p.counts.dropped_unknown},
          {"rejected_layout", p.counts.rejected_layout},
          {"train", p.counts.train},
          {"test", p.counts.test}}},
    };
}

void write_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << "id,label,family,split";
    for (std::size_t j = 0; j < ds.dimension(); ++j) out << ",f" << j;
    out << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int fam = ds.y_family.empty() ? -1 : ds.y_family[i];
        out << csv_field(ds.ids[i]) << ',' << ds.y_binary[i] << ','
            << (fam >= 0 ? csv_field(ds.family_names[static_cast<std::size_t>(fam)]) : std::string()) << ','
            << split_name(ds.split.empty() ? Split::train : ds.split[i]);
        for (double v : ds.X.row(i)) out << ',' << format_fixed(v);
        out << '\n';
    }
    if (!out) throw Error(ErrorCode::io, "write failure on " + path.string());
}

LabeledDataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "cannot open dataset " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::io, path.string() + " is empty");
    auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "id" || header[1] != "label" || header[2] != "family" || header[3] != "split")
        throw Error(ErrorCode::io, path.string() + ": unexpected header");
    const std::size_t d = header.size() - 4;

    LabeledDataset ds;
    std::map<std::string, std::size_t> family_counts;
    std::vector<std::string> families;
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != header.size()) throw Error(ErrorCode::io, path.string() + ": ragged row for id " + f[0]);
        ds.ids.push_back(f[0]);
        ds.y_binary.push_back(static_cast<int>(parse_csv_double(f[1], path.string())));
        families.push_back(f[2]);
        if (!f[2].empty()) ++family_counts[f[2]];
        ds.split.push_back(split_from_name(f[3]));
        for (std::size_t j = 0; j < d; ++j) values.push_back(parse_csv_double(f[4 + j], path.string()));
    }
    ds.X = Matrix(ds.ids.size(), d);
    ds.X.data() = std::move(values);
    ds.family_names = rank_by_frequency(family_counts);
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < ds.family_names.size(); ++i) index[ds.family_names[i]] = static_cast<int>(i);
    for (const auto& name : families) ds.y_family.push_back(name.empty() ? -1 : index[name]);
    return ds;
}

}  // namespace malsim::features
