#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "malsim/features.hpp"
#include "malsim/harness.hpp"
#include "malsim/metrics.hpp"
#include "malsim/similarity.hpp"

namespace malsim::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

const std::set<std::string> kModels{"ae", "mlp_binary", "mlp_family", "gbdt_binary", "gbdt_binary_family",
                                    "gbdt_family"};

template <typename T>
void read_into(const json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw Error(ErrorCode::config, where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
            throw Error(ErrorCode::config, "unknown key '" + key + "' in " + where);
}

json hyperparams_json(const gbdt::Hyperparams& p) {
    return {{"max_depth", p.max_depth}, {"learning_rate", p.learning_rate}, {"rounds", p.rounds},
            {"lambda", p.lambda},       {"gamma", p.gamma},                 {"min_child_weight", p.min_child_weight},
            {"base_score", p.base_score}};
}

}  // namespace

std::string ExperimentConfig::metric_for(const std::string& source) const {
    if (auto it = metric_per_source.find(source); it != metric_per_source.end()) return it->second;
    return source.rfind("gbdt_", 0) == 0 ? "leaf-overlap" : "euclidean";
}

ExperimentConfig config_from_json(const json& j) {
    reject_unknown(j,
                   {"seed", "input", "synth", "vocab_cap", "train_fraction", "binarize_bow", "top_n_families",
                    "models", "sources", "k_list", "metric_per_source", "embed_split", "cluster_sample",
                    "knn_sample", "mlp", "ae", "gbdt"},
                   "config");
    ExperimentConfig c;
    try {
        read_into(j, "seed", c.seed);
        c.synth.seed = c.seed;
        if (j.contains("input") && !j["input"].is_null()) c.input = j["input"].get<std::string>();
        if (j.contains("synth")) {
            json s = j["synth"];
            if (!s.contains("seed")) s["seed"] = c.seed;
            c.synth = synth_spec_from_json(s);
        }
        read_into(j, "vocab_cap", c.vocab_cap);
        read_into(j, "train_fraction", c.train_fraction);
        read_into(j, "binarize_bow", c.binarize_bow);
        read_into(j, "top_n_families", c.top_n_families);
        read_into(j, "models", c.models);
        read_into(j, "sources", c.sources);
        read_into(j, "k_list", c.k_list);
        read_into(j, "metric_per_source", c.metric_per_source);
        read_into(j, "embed_split", c.embed_split);
        if (j.contains("cluster_sample") && !j["cluster_sample"].is_null())
            c.cluster_sample = j["cluster_sample"].get<std::size_t>();
        if (j.contains("knn_sample") && !j["knn_sample"].is_null()) c.knn_sample = j["knn_sample"].get<std::size_t>();
        if (j.contains("mlp")) {
            const auto& m = j["mlp"];
            reject_unknown(m, {"hidden", "embedding_dim", "dropout", "learning_rate", "batch_size", "max_epochs",
                               "patience", "validation_fraction"},
                           "mlp");
            read_into(m, "hidden", c.mlp.hidden);
            read_into(m, "embedding_dim", c.mlp.embedding_dim);
            read_into(m, "dropout", c.mlp.dropout);
            read_into(m, "learning_rate", c.mlp.learning_rate);
            read_into(m, "batch_size", c.mlp.batch_size);
            read_into(m, "max_epochs", c.mlp.max_epochs);
            read_into(m, "patience", c.mlp.patience);
            read_into(m, "validation_fraction", c.mlp.validation_fraction);
        }
        if (j.contains("ae")) {
            const auto& a = j["ae"];
            reject_unknown(a, {"fraction", "hidden", "bottleneck", "epochs", "batch_size", "learning_rate", "block"}, "ae");
            read_into(a, "fraction", c.ae.fraction);
            read_into(a, "hidden", c.ae.hidden);
            read_into(a, "bottleneck", c.ae.bottleneck);
            read_into(a, "epochs", c.ae.epochs);
            read_into(a, "batch_size", c.ae.batch_size);
            read_into(a, "learning_rate", c.ae.learning_rate);
            read_into(a, "block", c.ae.block);
        }
        if (j.contains("gbdt")) {
            const auto& g = j["gbdt"];
            reject_unknown(g, {"max_depth", "learning_rate", "rounds", "lambda", "gamma", "min_child_weight",
                               "base_score", "grid_search", "grid", "cv_folds", "family_leaf_scope"},
                           "gbdt");
            read_into(g, "max_depth", c.gbdt.params.max_depth);
            read_into(g, "learning_rate", c.gbdt.params.learning_rate);
            read_into(g, "rounds", c.gbdt.params.rounds);
            read_into(g, "lambda", c.gbdt.params.lambda);
            read_into(g, "gamma", c.gbdt.params.gamma);
            read_into(g, "min_child_weight", c.gbdt.params.min_child_weight);
            read_into(g, "base_score", c.gbdt.params.base_score);
            read_into(g, "grid_search", c.gbdt.grid_search);
            read_into(g, "cv_folds", c.gbdt.cv_folds);
            read_into(g, "family_leaf_scope", c.gbdt.family_leaf_scope);
            if (g.contains("grid")) {
                const auto& gr = g["grid"];
                reject_unknown(gr, {"max_depth", "learning_rate", "rounds"}, "gbdt.grid");
                read_into(gr, "max_depth", c.gbdt.grid.max_depth);
                read_into(gr, "learning_rate", c.gbdt.grid.learning_rate);
                read_into(gr, "rounds", c.gbdt.grid.rounds);
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::config, std::string("bad config value: ") + e.what());
    }
    for (const auto& m : c.models)
        if (!kModels.count(m)) throw Error(ErrorCode::config, "unknown model '" + m + "'");
    for (const auto& s : c.sources)
        if (s != "raw_features" && !kModels.count(s)) throw Error(ErrorCode::config, "unknown embedding source '" + s + "'");
    for (const auto& [source, metric] : c.metric_per_source) similarity::metric_from_name(metric);
    if (c.k_list.empty()) throw Error(ErrorCode::config, "k_list is empty");
    if (c.embed_split != "test" && c.embed_split != "train" && c.embed_split != "all")
        throw Error(ErrorCode::config, "embed_split must be test, train or all");
    if (c.gbdt.family_leaf_scope != "all_trees" && c.gbdt.family_leaf_scope != "predicted_class")
        throw Error(ErrorCode::config, "gbdt.family_leaf_scope must be all_trees or predicted_class");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0))
        throw Error(ErrorCode::config, "train_fraction must lie in (0, 1)");
    return c;
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["input"] = c.input ? json(*c.input) : json(nullptr);
    j["synth"] = to_json(c.synth);
    j["vocab_cap"] = c.vocab_cap;
    j["train_fraction"] = c.train_fraction;
    j["binarize_bow"] = c.binarize_bow;
    j["top_n_families"] = c.top_n_families;
    j["models"] = c.models;
    j["sources"] = c.sources;
    j["k_list"] = c.k_list;
    j["metric_per_source"] = c.metric_per_source;
    j["embed_split"] = c.embed_split;
    j["cluster_sample"] = c.cluster_sample ? json(*c.cluster_sample) : json(nullptr);
    j["knn_sample"] = c.knn_sample ? json(*c.knn_sample) : json(nullptr);
    j["mlp"] = {{"hidden", c.mlp.hidden},
                {"embedding_dim", c.mlp.embedding_dim},
                {"dropout", c.mlp.dropout},
                {"learning_rate", c.mlp.learning_rate},
                {"batch_size", c.mlp.batch_size},
                {"max_epochs", c.mlp.max_epochs},
                {"patience", c.mlp.patience},
                {"validation_fraction", c.mlp.validation_fraction}};
    j["ae"] = {{"fraction", c.ae.fraction},   {"hidden", c.ae.hidden},         {"bottleneck", c.ae.bottleneck},
               {"epochs", c.ae.epochs},       {"batch_size", c.ae.batch_size}, {"learning_rate", c.ae.learning_rate},
               {"block", c.ae.block}};
    json g = hyperparams_json(c.gbdt.params);
    g["grid_search"] = c.gbdt.grid_search;
    g["cv_folds"] = c.gbdt.cv_folds;
    g["family_leaf_scope"] = c.gbdt.family_leaf_scope;
    g["grid"] = {{"max_depth", c.gbdt.grid.max_depth},
                 {"learning_rate", c.gbdt.grid.learning_rate},
                 {"rounds", c.gbdt.grid.rounds}};
    j["gbdt"] = std::move(g);
    return j;
}

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_json_file(path)); }

std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "missing file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::io, path.string() + ": " + e.what());
    }
}

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
}

void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_artifact, "missing file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return hex64(fnv1a64(buf.str()));
}

namespace {

// Per-step manifest: config, hash, seeds and digests of inputs/outputs,
// all paths relative to the experiment directory.
class Step {
public:
    Step(std::string name, const ExperimentConfig& c, const RunOptions& o)
        : name_(std::move(name)), config_(c), options_(o), dir_(o.out / name_) {
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }
    const fs::path& root() const { return options_.out; }

    json require(const std::string& upstream) {
        const fs::path path = options_.out / upstream / "manifest.json";
        if (!fs::exists(path))
            throw Error(ErrorCode::missing_artifact, "step '" + name_ + "' needs the output of '" + upstream +
                                                         "' (missing " + path.string() + "); run `malsim " + upstream +
                                                         "` first");
        json m = read_json_file(path);
        const std::string theirs = m.value("config_hash", "");
        const std::string ours = config_hash(config_);
        if (theirs != ours) {
            if (!options_.force)
                throw Error(ErrorCode::hash_mismatch, "config hash " + ours + " differs from the '" + upstream +
                                                          "' step (" + theirs + "); rerun it or pass --force");
            log_warning("config hash differs from step '" + upstream + "'; continuing because of --force");
        }
        upstream_[upstream] = theirs;
        return m;
    }

    void input(const fs::path& p) { inputs_[relative(p)] = file_digest(p); }
    void output(const fs::path& p) { outputs_[relative(p)] = file_digest(p); }
    json& extra() { return extra_; }

    void finish() {
        json m;
        m["step"] = name_;
        m["version"] = kVersion;
        m["config_hash"] = config_hash(config_);
        m["seed"] = config_.seed;
        m["config"] = to_json(config_);
        m["upstream"] = upstream_;
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        m["details"] = extra_;
        write_json_file(dir_ / "manifest.json", m);
    }

private:
    std::string relative(const fs::path& p) const {
        auto rel = fs::relative(p, options_.out);
        if (rel.empty() || *rel.begin() == "..") return p.string();
        return rel.generic_string();
    }

    std::string name_;
    const ExperimentConfig& config_;
    const RunOptions& options_;
    fs::path dir_;
    json upstream_ = json::object();
    json inputs_ = json::object();
    json outputs_ = json::object();
    json extra_ = json::object();
};

bool selected(const RunOptions& o, const std::string& name) {
    return o.only.empty() || std::find(o.only.begin(), o.only.end(), name) != o.only.end();
}

Matrix with_family_column(const Matrix& x, std::span<const int> family) {
    Matrix out(x.rows(), x.cols() + 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::copy(x.row(i).begin(), x.row(i).end(), out.row(i).begin());
        out(i, x.cols()) = static_cast<double>(family[i]);
    }
    return out;
}

struct FamilyData {
    features::LabeledDataset data;  // top-n family rows, y_family re-encoded 0..K-1
    std::size_t k = 0;
};

FamilyData family_subset(const features::LabeledDataset& ds, std::size_t top_n) {
    FamilyData fd;
    if (std::none_of(ds.y_family.begin(), ds.y_family.end(), [](int f) { return f >= 0; })) return fd;
    fd.data = features::filter_top_n_families(ds, top_n);
    fd.k = fd.data.family_names.size();
    return fd;
}

Matrix ae_input(const Matrix& x, const json& pipeline, const std::string& block) {
    if (block.empty()) return x;
    for (const auto& b : pipeline.at("layout").at("blocks")) {
        if (b.at("name").get<std::string>() != block) continue;
        const auto off = b.at("offset").get<std::size_t>();
        const auto size = b.at("size").get<std::size_t>();
        Matrix out(x.rows(), size);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < size; ++j) out(i, j) = x(i, off + j);
        return out;
    }
    throw Error(ErrorCode::config, "unknown feature block '" + block + "'");
}

neural::ClassifierArch arch_for(const MlpSettings& m, int outputs) {
    neural::ClassifierArch a;
    a.hidden = m.hidden;
    a.embedding_dim = m.embedding_dim;
    a.dropout = m.dropout;
    a.num_outputs = outputs;
    return a;
}

neural::TrainConfig train_config_for(const MlpSettings& m, std::uint64_t seed) {
    neural::TrainConfig t;
    t.learning_rate = m.learning_rate;
    t.batch_size = m.batch_size;
    t.max_epochs = m.max_epochs;
    t.patience = m.patience;
    t.seed = seed;
    t.validation_fraction = m.validation_fraction;
    return t;
}

struct GbdtRun {
    gbdt::GbdtModel model;
    std::vector<double> losses;
    json grid = nullptr;
};

GbdtRun fit_gbdt(const Matrix& x, std::span<const int> y, gbdt::Objective objective, int k, const GbdtSettings& s,
                 std::uint64_t seed) {
    gbdt::TrainOptions opts;
    opts.objective = objective;
    opts.num_classes = k;
    opts.params = s.params;
    GbdtRun run;
    if (s.grid_search) {
        const auto result = gbdt::grid_search_cv(x, y, opts, s.grid, s.cv_folds, seed);
        opts.params = result.best;
        json entries = json::array();
        for (const auto& e : result.entries)
            entries.push_back({{"max_depth", e.max_depth}, {"learning_rate", e.learning_rate}, {"rounds", e.rounds},
                               {"mean_accuracy", e.mean_accuracy}});
        run.grid = {{"best", hyperparams_json(result.best)}, {"best_accuracy", result.best_accuracy}, {"entries", entries}};
    }
    opts.on_round = [&](int, double loss) { run.losses.push_back(loss); };
    run.model = gbdt::train_gbdt(x, y, opts);
    return run;
}

std::vector<std::size_t> split_rows(const features::LabeledDataset& ds, const std::string& which) {
    if (which == "all") {
        std::vector<std::size_t> r(ds.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = i;
        return r;
    }
    return ds.rows_in(features::split_from_name(which));
}

}  // namespace

void cmd_synth(const ExperimentConfig& c, const RunOptions& o) {
    Step step("synth", c, o);
    const fs::path corpus = step.dir() / "corpus.jsonl";
    const fs::path truth = step.dir() / "truth.csv";
    std::ofstream jsonl(corpus, std::ios::binary), t(truth, std::ios::binary);
    if (!jsonl || !t) throw Error(ErrorCode::io, "cannot write synthetic corpus under " + step.dir().string());
    const auto counts = write_synthetic_corpus(c.synth, jsonl, t);
    jsonl.close();
    t.close();
    step.output(corpus);
    step.output(truth);
    step.extra() = {{"lines", counts.lines},
                    {"samples", counts.samples},
                    {"duplicates", counts.duplicates},
                    {"malformed", counts.malformed},
                    {"unlabeled", counts.unlabeled}};
    step.finish();
}

void cmd_preprocess(const ExperimentConfig& c, const RunOptions& o) {
    Step step("preprocess", c, o);
    fs::path corpus;
    if (c.input) {
        corpus = *c.input;
        if (!fs::exists(corpus)) throw Error(ErrorCode::missing_artifact, "input corpus " + corpus.string() + " not found");
    } else {
        step.require("synth");
        corpus = o.out / "synth" / "corpus.jsonl";
    }
    step.input(corpus);
    auto parsed = features::parse_records_file(corpus);
    if (parsed.skipped > 0) log_warning("skipped " + std::to_string(parsed.skipped) + " malformed lines");
    features::PipelineConfig pc;
    pc.vocab_cap = c.vocab_cap;
    pc.train_fraction = c.train_fraction;
    pc.seed = c.seed;
    pc.layout.binarize_bow = c.binarize_bow;
    auto prepared = features::prepare_dataset(std::move(parsed.records), pc);

    const fs::path dataset = step.dir() / "dataset.csv";
    const fs::path pipeline = step.dir() / "pipeline.json";
    features::write_dataset_csv(prepared.data, dataset);
    json p = features::manifest_json(prepared);
    p["counts"]["skipped_lines"] = parsed.skipped;
    write_json_file(pipeline, p);
    step.output(dataset);
    step.output(pipeline);
    step.extra() = p["counts"];
    step.extra()["dimension"] = prepared.data.dimension();
    step.finish();
}

void cmd_train(const ExperimentConfig& c, const RunOptions& o) {
    Step step("train", c, o);
    step.require("preprocess");
    const fs::path dataset_path = o.out / "preprocess" / "dataset.csv";
    const fs::path pipeline_path = o.out / "preprocess" / "pipeline.json";
    step.input(dataset_path);
    step.input(pipeline_path);
    const auto ds = features::read_dataset_csv(dataset_path);
    const json pipeline = read_json_file(pipeline_path);
    const auto train = ds.subset(ds.rows_in(features::Split::train));

    json trained = json::object();
    json skipped = json::object();
    const FamilyData fam_all = family_subset(ds, c.top_n_families);
    features::LabeledDataset fam_train;
    if (fam_all.k >= 2) fam_train = fam_all.data.subset(fam_all.data.rows_in(features::Split::train));

    for (const auto& name : c.models) {
        if (!selected(o, name)) continue;
        const fs::path dir = step.dir() / name;
        fs::create_directories(dir);
        json info;
        if (name == "gbdt_binary" || name == "gbdt_binary_family") {
            const Matrix x = name == "gbdt_binary" ? train.X : with_family_column(train.X, train.y_family);
            auto run = fit_gbdt(x, train.y_binary, gbdt::Objective::logistic, 2, c.gbdt, c.seed);
            gbdt::save_model(run.model, dir / "model.json");
            write_json_file(dir / "history.json", {{"loss_per_round", run.losses}, {"grid", run.grid}});
            info = {{"rows", train.size()}, {"features", x.cols()}, {"family_feature", name != "gbdt_binary"}};
        } else if (name == "gbdt_family") {
            if (fam_all.k < 2 || fam_train.size() == 0) {
                skipped[name] = "fewer than two families";
                log_warning("skipping gbdt_family: fewer than two families");
                continue;
            }
            auto run = fit_gbdt(fam_train.X, fam_train.y_family, gbdt::Objective::softmax, static_cast<int>(fam_all.k),
                                c.gbdt, c.seed);
            gbdt::save_model(run.model, dir / "model.json");
            write_json_file(dir / "history.json", {{"loss_per_round", run.losses}, {"grid", run.grid}});
            info = {{"rows", fam_train.size()}, {"classes", fam_all.k}, {"family_names", fam_all.data.family_names}};
        } else if (name == "mlp_binary") {
            auto tc = neural::train_classifier(train.X, train.y_binary, arch_for(c.mlp, 1), train_config_for(c.mlp, c.seed));
            neural::save_model(tc.model, dir / "model.json", {{"task", "binary"}});
            write_json_file(dir / "history.json", neural::history_to_json(tc.history));
            info = {{"rows", train.size()}, {"best_epoch", tc.history.best_epoch}, {"epochs", tc.history.epochs.size()}};
        } else if (name == "mlp_family") {
            if (fam_all.k < 2 || fam_train.size() == 0) {
                skipped[name] = "fewer than two families";
                log_warning("skipping mlp_family: fewer than two families");
                continue;
            }
            auto tcfg = train_config_for(c.mlp, c.seed);
            tcfg.loss = neural::LossKind::categorical_ce;
            tcfg.class_weights = features::compute_class_weights(fam_train.y_family, fam_all.k);
            auto tc = neural::train_classifier(fam_train.X, fam_train.y_family,
                                               arch_for(c.mlp, static_cast<int>(fam_all.k)), tcfg);
            neural::save_model(tc.model, dir / "model.json", {{"task", "family"}, {"family_names", fam_all.data.family_names}});
            write_json_file(dir / "history.json", neural::history_to_json(tc.history));
            info = {{"rows", fam_train.size()}, {"classes", fam_all.k}, {"best_epoch", tc.history.best_epoch},
                    {"epochs", tc.history.epochs.size()}, {"class_weights", tcfg.class_weights}};
        } else if (name == "ae") {
            neural::AutoencoderConfig ac;
            ac.fraction = c.ae.fraction;
            ac.hidden = c.ae.hidden;
            ac.bottleneck = c.ae.bottleneck;
            ac.epochs = c.ae.epochs;
            ac.batch_size = c.ae.batch_size;
            ac.learning_rate = c.ae.learning_rate;
            ac.seed = c.seed;
            auto ae = neural::train_autoencoder(ae_input(train.X, pipeline, c.ae.block), ac);
            neural::save_model(ae.encoder, dir / "encoder.json", {{"block", c.ae.block}});
            neural::save_model(ae.decoder, dir / "decoder.json", {{"block", c.ae.block}});
            write_json_file(dir / "history.json", {{"initial_loss", ae.initial_loss}, {"epoch_losses", ae.epoch_losses}});
            info = {{"rows", ae.trained_rows}, {"block", c.ae.block}};
        }
        for (const auto& entry : fs::directory_iterator(dir)) step.output(entry.path());
        trained[name] = info;
    }
    step.extra() = {{"trained", trained}, {"skipped", skipped}};
    step.finish();
}

void cmd_embed(const ExperimentConfig& c, const RunOptions& o) {
    Step step("embed", c, o);
    const json train_manifest = step.require("train");
    const fs::path dataset_path = o.out / "preprocess" / "dataset.csv";
    step.input(dataset_path);
    const auto ds = features::read_dataset_csv(dataset_path);
    const json pipeline = read_json_file(o.out / "preprocess" / "pipeline.json");
    const auto rows = split_rows(ds, c.embed_split);
    const auto part = ds.subset(rows);
    const json& trained = train_manifest.at("details").at("trained");

    json written = json::object();
    for (const auto& source : c.sources) {
        if (!selected(o, source)) continue;
        if (source != "raw_features" && !trained.contains(source)) {
            log_warning("no trained model for embedding source '" + source + "'; skipped");
            continue;
        }
        auto set = std::make_shared<similarity::EmbeddingSet>();
        set->ids = part.ids;
        set->labels_binary = part.y_binary;
        set->labels_family = part.y_family;
        set->source = source;
        const fs::path model_dir = o.out / "train" / source;
        if (source == "raw_features") {
            set->vectors = part.X;
        } else if (source == "ae") {
            step.input(model_dir / "encoder.json");
            const auto enc = neural::load_model(model_dir / "encoder.json");
            set->vectors = neural::extract_embedding(enc, ae_input(part.X, pipeline, c.ae.block));
        } else if (source == "mlp_binary" || source == "mlp_family") {
            step.input(model_dir / "model.json");
            set->vectors = neural::extract_embedding(neural::load_model(model_dir / "model.json"), part.X);
        } else {
            step.input(model_dir / "model.json");
            const auto model = gbdt::load_model(model_dir / "model.json");
            const Matrix x = source == "gbdt_binary_family" ? with_family_column(part.X, part.y_family) : part.X;
            set->kind = similarity::EmbeddingKind::leaf_index;
            const bool per_class = model.objective == gbdt::Objective::softmax &&
                                   c.gbdt.family_leaf_scope == "predicted_class";
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const auto leaves =
                    per_class ? gbdt::leaf_embedding(model, x.row(i), gbdt::LeafScope::class_trees,
                                                     gbdt::predict_class(model, x.row(i)))
                              : gbdt::leaf_embedding(model, x.row(i));
                std::vector<double> v(leaves.begin(), leaves.end());
                set->vectors.append_row(v);
            }
        }
        const fs::path out = step.dir() / (source + ".csv");
        similarity::write_embeddings(*set, out, similarity::metric_from_name(c.metric_for(source)));
        step.output(out);
        step.output(fs::path(out).replace_extension(".json"));
        written[source] = {{"kind", similarity::kind_name(set->kind)}, {"n", set->size()}, {"d", set->dimension()}};
    }
    step.extra() = {{"split", c.embed_split}, {"embeddings", written}};
    step.finish();
}

namespace {

std::vector<std::string> embedding_sources(const json& embed_manifest, const ExperimentConfig& c, const RunOptions& o) {
    std::vector<std::string> out;
    const auto& e = embed_manifest.at("details").at("embeddings");
    for (const auto& source : c.sources)
        if (e.contains(source) && selected(o, source)) out.push_back(source);
    return out;
}

}  // namespace

void cmd_eval_knn(const ExperimentConfig& c, const RunOptions& o) {
    Step step("eval-knn", c, o);
    const json embed = step.require("embed");
    json summary = json::object();
    for (const auto& source : embedding_sources(embed, c, o)) {
        const fs::path in = o.out / "embed" / (source + ".csv");
        step.input(in);
        auto set = std::make_shared<const similarity::EmbeddingSet>(similarity::read_embeddings(in));
        const auto metric = similarity::metric_from_name(o.metric ? *o.metric : c.metric_for(source));
        similarity::BruteForceIndex index(set, metric);
        std::vector<std::size_t> ks, dropped;
        for (auto k : c.k_list) (k < set->size() ? ks : dropped).push_back(k);
        for (auto k : dropped)
            log_warning(source + ": K=" + std::to_string(k) + " needs more than " + std::to_string(set->size()) +
                        " embeddings; dropped");
        if (ks.empty()) continue;
        const auto report = similarity::label_homogeneity_at_k(index, ks, similarity::LabelField::binary, c.knn_sample, c.seed);
        json j = similarity::to_json(report);
        j["dropped_k"] = dropped;
        const fs::path json_out = step.dir() / (source + ".json");
        const fs::path csv_out = step.dir() / (source + ".csv");
        write_json_file(json_out, j);
        write_text_file(csv_out, similarity::homogeneity_csv(
                                     report, "Label-Homogeneity@K, " + source + " embeddings, " +
                                                 std::string(similarity::metric_name(metric)) + " distance"));
        step.output(json_out);
        step.output(csv_out);
        summary[source] = std::string(similarity::metric_name(metric));
    }
    step.extra() = {{"evaluated", summary}};
    step.finish();
}

void cmd_eval_cluster(const ExperimentConfig& c, const RunOptions& o) {
    Step step("eval-cluster", c, o);
    const json embed = step.require("embed");
    json summary = json::object();
    for (const auto& source : embedding_sources(embed, c, o)) {
        const fs::path in = o.out / "embed" / (source + ".csv");
        const auto set = similarity::read_embeddings(in);
        if (set.kind != similarity::EmbeddingKind::continuous) {
            summary[source] = "skipped: leaf-index embedding";
            continue;
        }
        step.input(in);
        const auto r = metrics::cluster_metrics(set.vectors, set.labels_binary, c.cluster_sample, c.seed);
        json j = metrics::to_json(r);
        j["source"] = source;
        j["labels"] = "binary";
        const fs::path out = step.dir() / (source + ".json");
        write_json_file(out, j);
        step.output(out);
        summary[source] = "evaluated";
    }
    step.extra() = {{"evaluated", summary}};
    step.finish();
}

void cmd_eval_classify(const ExperimentConfig& c, const RunOptions& o) {
    Step step("eval-classify", c, o);
    const json train_manifest = step.require("train");
    const fs::path dataset_path = o.out / "preprocess" / "dataset.csv";
    step.input(dataset_path);
    const auto ds = features::read_dataset_csv(dataset_path);
    const auto test = ds.subset(ds.rows_in(features::Split::test));
    const FamilyData fam_all = family_subset(ds, c.top_n_families);
    features::LabeledDataset fam_test;
    if (fam_all.k >= 2) fam_test = fam_all.data.subset(fam_all.data.rows_in(features::Split::test));
    const json& trained = train_manifest.at("details").at("trained");

    json summary = json::object();
    for (const auto& name : c.models) {
        if (name == "ae" || !trained.contains(name) || !selected(o, name)) continue;
        const fs::path model_path = o.out / "train" / name / "model.json";
        step.input(model_path);
        const bool family = name == "gbdt_family" || name == "mlp_family";
        const auto& part = family ? fam_test : test;
        if (part.size() == 0) continue;
        const std::vector<int> y = family ? part.y_family : part.y_binary;
        const int k = family ? static_cast<int>(fam_all.k) : 2;
        Matrix scores(part.size(), family ? static_cast<std::size_t>(k) : 1);
        std::vector<int> pred(part.size());
        if (name.rfind("gbdt_", 0) == 0) {
            const auto model = gbdt::load_model(model_path);
            const Matrix x = name == "gbdt_binary_family" ? with_family_column(part.X, part.y_family) : part.X;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const auto p = gbdt::predict_proba(model, x.row(i));
                std::copy(p.begin(), p.end(), scores.row(i).begin());
                pred[i] = gbdt::predict_class(model, x.row(i));
            }
        } else {
            const auto probs = neural::predict(neural::load_model(model_path), part.X);
            scores = neural::from_mat(probs);
            for (std::size_t i = 0; i < part.size(); ++i) {
                if (!family) {
                    pred[i] = scores(i, 0) >= 0.5 ? 1 : 0;
                } else {
                    auto row = scores.row(i);
                    pred[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
                }
            }
        }
        metrics::ReportOptions ro;
        ro.want_auc = true;
        if (family) ro.top_k = std::min(5, k);
        const auto report = metrics::classification_report(y, pred, k, &scores, ro);
        json j = metrics::to_json(report);
        j["model"] = name;
        j["task"] = family ? "family" : "binary";
        const fs::path out = step.dir() / (name + ".json");
        write_json_file(out, j);
        step.output(out);
        summary[name] = report.accuracy;
    }
    step.extra() = {{"accuracy", summary}};
    step.finish();
}

void run_all(const ExperimentConfig& c, const RunOptions& o) {
    if (!c.input) cmd_synth(c, o);
    cmd_preprocess(c, o);
    cmd_train(c, o);
    cmd_embed(c, o);
    cmd_eval_knn(c, o);
    cmd_eval_cluster(c, o);
    cmd_eval_classify(c, o);
    cmd_report(c, o);
}

}  // namespace malsim::harness
