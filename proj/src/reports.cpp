#include <sstream>

#include "malsim/harness.hpp"

namespace malsim::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string num(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_null()) return "";
    return format_decimals(v.get<double>(), 4);
}

struct Table {
    std::string title;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string csv() const {
        std::ostringstream out;
        out << "# " << title << '\n';
        for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << csv_field(header[i]);
        out << '\n';
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << csv_field(r[i]);
            out << '\n';
        }
        return out.str();
    }

    std::string markdown() const {
        std::ostringstream out;
        out << "### " << title << "\n\n|";
        for (const auto& h : header) out << ' ' << h << " |";
        out << "\n|";
        for (std::size_t i = 0; i < header.size(); ++i) out << " --- |";
        out << '\n';
        for (const auto& r : rows) {
            out << '|';
            for (const auto& c : r) out << ' ' << c << " |";
            out << '\n';
        }
        return out.str() + "\n";
    }

    json to_json() const { return {{"title", title}, {"header", header}, {"rows", rows}}; }
};

std::optional<json> load_if_present(const fs::path& p) {
    if (!fs::exists(p)) return std::nullopt;
    return read_json_file(p);
}

}  // namespace

void cmd_report(const ExperimentConfig& c, const RunOptions& o) {
    const fs::path dir = o.out / "report";
    fs::create_directories(dir);
    json manifest;
    manifest["step"] = "report";
    manifest["config_hash"] = config_hash(c);
    manifest["seed"] = c.seed;
    manifest["config"] = to_json(c);
    json inputs = json::object();
    for (const char* upstream : {"eval-knn", "eval-cluster", "eval-classify"}) {
        const fs::path m = o.out / upstream / "manifest.json";
        if (!fs::exists(m))
            throw Error(ErrorCode::missing_artifact, "report needs the output of '" + std::string(upstream) +
                                                         "' (missing " + m.string() + ")");
        const json up = read_json_file(m);
        if (up.value("config_hash", "") != config_hash(c)) {
            if (!o.force)
                throw Error(ErrorCode::hash_mismatch, std::string("config hash differs from the '") + upstream +
                                                          "' step; rerun it or pass --force");
            log_warning(std::string("config hash differs from step '") + upstream + "'; continuing because of --force");
        }
        inputs[std::string(upstream) + "/manifest.json"] = file_digest(m);
    }

    std::vector<std::pair<std::string, Table>> per_source;
    std::vector<std::string> metric_of;
    for (const auto& source : c.sources) {
        auto r = load_if_present(o.out / "eval-knn" / (source + ".json"));
        if (!r) continue;
        inputs["eval-knn/" + source + ".json"] = file_digest(o.out / "eval-knn" / (source + ".json"));
        Table t;
        t.title = "Label-Homogeneity@K, " + source + " embeddings, " + r->at("metric").get<std::string>() + " distance";
        t.header = {"K", "Benign Mean", "Benign Std", "Malicious Mean", "Malicious Std", "All Mean", "All Std"};
        for (const auto& row : r->at("rows"))
            t.rows.push_back({std::to_string(row.at("k").get<std::size_t>()), num(row["benign"]["mean"]),
                              num(row["benign"]["std"]), num(row["malicious"]["mean"]), num(row["malicious"]["std"]),
                              num(row["all"]["mean"]), num(row["all"]["std"])});
        per_source.emplace_back(source, t);
        metric_of.push_back(r->at("metric").get<std::string>());
    }

    Table summary;
    summary.title = "Label-Homogeneity@K summary (All Mean)";
    summary.header = {"Embedding", "Metric"};
    for (auto k : c.k_list) summary.header.push_back("K=" + std::to_string(k));
    for (std::size_t s = 0; s < per_source.size(); ++s) {
        const auto& [source, t] = per_source[s];
        std::vector<std::string> row{source, metric_of[s]};
        for (auto k : c.k_list) {
            std::string cell;
            for (const auto& r : t.rows)
                if (r[0] == std::to_string(k)) cell = r[5];
            row.push_back(cell);
        }
        summary.rows.push_back(std::move(row));
    }

    Table cluster;
    cluster.title = "Clustering validity of embeddings (binary labels)";
    cluster.header = {"Embedding", "Silhouette", "Davies-Bouldin", "Calinski-Harabasz", "N"};
    for (const auto& source : c.sources) {
        const fs::path p = o.out / "eval-cluster" / (source + ".json");
        auto r = load_if_present(p);
        if (!r) continue;
        inputs["eval-cluster/" + source + ".json"] = file_digest(p);
        cluster.rows.push_back({source, num((*r)["silhouette"]), num((*r)["davies_bouldin"]),
                                num((*r)["calinski_harabasz"]), std::to_string(r->at("n").get<std::size_t>())});
    }

    Table binary;
    binary.title = "Binary classification on the test split";
    binary.header = {"Model", "Accuracy", "Precision", "Recall", "F1", "ROC-AUC"};
    Table family;
    family.title = "Family classification on the test split";
    family.header = {"Model", "Accuracy", "Top-5 Accuracy", "Macro Precision", "Macro Recall", "Macro F1",
                     "ROC-AUC (OvR macro)"};
    for (const auto& model : c.models) {
        const fs::path p = o.out / "eval-classify" / (model + ".json");
        auto r = load_if_present(p);
        if (!r) continue;
        inputs["eval-classify/" + model + ".json"] = file_digest(p);
        if (r->at("task") == "binary") {
            const auto& pos = r->at("per_class").at(1);
            binary.rows.push_back({model, num((*r)["accuracy"]), num(pos["precision"]), num(pos["recall"]),
                                   num(pos["f1"]), num(r->value("roc_auc", json()))});
        } else {
            family.rows.push_back({model, num((*r)["accuracy"]), num(r->value("top_k_accuracy", json())),
                                   num((*r)["macro"]["precision"]), num((*r)["macro"]["recall"]),
                                   num((*r)["macro"]["f1"]), num(r->contains("roc_auc_ovr_macro") ? (*r)["roc_auc_ovr_macro"] : r->value("roc_auc", json()))});
        }
    }

    std::vector<std::pair<std::string, const Table*>> files;
    for (const auto& [source, t] : per_source) files.emplace_back("homogeneity_" + source, &t);
    files.emplace_back("homogeneity_summary", &summary);
    files.emplace_back("clustering", &cluster);
    files.emplace_back("classification_binary", &binary);
    files.emplace_back("classification_family", &family);

    json all = json::object();
    std::string md = "# Experiment report\n\nconfig hash `" + config_hash(c) + "`, seed " + std::to_string(c.seed) + "\n\n";
    json outputs = json::object();
    for (const auto& [name, t] : files) {
        write_text_file(dir / (name + ".csv"), t->csv());
        outputs[name + ".csv"] = file_digest(dir / (name + ".csv"));
        all[name] = t->to_json();
        md += t->markdown();
    }
    write_json_file(dir / "report.json", all);
    write_text_file(dir / "report.md", md);
    outputs["report.json"] = file_digest(dir / "report.json");
    outputs["report.md"] = file_digest(dir / "report.md");
    manifest["inputs"] = inputs;
    manifest["outputs"] = outputs;
    write_json_file(dir / "manifest.json", manifest);
}

}  // namespace malsim::harness
