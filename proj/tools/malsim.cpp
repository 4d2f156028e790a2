#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "malsim/harness.hpp"

using namespace malsim;

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

struct Flags {
    std::string config;
    std::string out = "malsim-out";
    std::optional<std::uint64_t> seed;
    bool force = false;
    std::string only;
    std::string metric;
    std::string k;
    std::optional<std::size_t> top_n;
    std::optional<std::size_t> vocab_cap;
    bool family_feature = false;
    std::string input;
    std::optional<std::size_t> families;
    std::optional<std::size_t> samples;
    std::optional<double> overlap;
    std::optional<double> duplicate_rate;
    std::optional<double> malformed_rate;
};

harness::ExperimentConfig resolve(const Flags& f) {
    nlohmann::json j = f.config.empty() ? nlohmann::json::object() : harness::read_json_file(f.config);
    if (f.seed) {
        j["seed"] = *f.seed;
        if (j.contains("synth")) j["synth"].erase("seed");
    }
    if (!f.k.empty()) {
        std::vector<std::size_t> ks;
        for (const auto& s : split_list(f.k)) ks.push_back(std::stoul(s));
        j["k_list"] = ks;
    }
    if (f.top_n) j["top_n_families"] = *f.top_n;
    if (f.vocab_cap) j["vocab_cap"] = *f.vocab_cap;
    if (!f.input.empty()) j["input"] = f.input;
    if (f.families) j["synth"]["n_families"] = *f.families;
    if (f.samples) j["synth"]["samples_per_family"] = *f.samples;
    if (f.overlap) j["synth"]["overlap"] = *f.overlap;
    if (f.duplicate_rate) j["synth"]["duplicate_rate"] = *f.duplicate_rate;
    if (f.malformed_rate) j["synth"]["malformed_rate"] = *f.malformed_rate;
    auto c = harness::config_from_json(j);
    if (f.family_feature) {
        for (auto* list : {&c.models, &c.sources})
            if (std::find(list->begin(), list->end(), "gbdt_binary_family") == list->end())
                list->push_back("gbdt_binary_family");
    }
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"malsim: static-feature malware similarity experiments"};
    app.require_subcommand(1);
    Flags f;

    using Command = void (*)(const harness::ExperimentConfig&, const harness::RunOptions&);
    const std::vector<std::tuple<std::string, std::string, Command>> commands{
        {"synth", "Generate a synthetic EMBER-shaped corpus", harness::cmd_synth},
        {"preprocess", "Parse, clean, vectorize, normalize and split the corpus", harness::cmd_preprocess},
        {"train", "Train the configured models", harness::cmd_train},
        {"embed", "Write embedding sets for the configured sources", harness::cmd_embed},
        {"eval-knn", "Label-Homogeneity@K of every embedding set", harness::cmd_eval_knn},
        {"eval-cluster", "Clustering-validity metrics of continuous embeddings", harness::cmd_eval_cluster},
        {"eval-classify", "Classification metrics on the test split", harness::cmd_eval_classify},
        {"report", "Merge step reports into CSV, JSON and Markdown tables", harness::cmd_report},
        {"run", "Run every step in order", harness::run_all},
    };
    std::vector<std::pair<CLI::App*, Command>> subs;
    for (const auto& [name, help, fn] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", f.config, "Experiment config JSON");
        sub->add_option("--out", f.out, "Experiment directory");
        sub->add_option("--seed", f.seed, "Global seed");
        sub->add_flag("--force", f.force, "Run despite a config-hash mismatch with upstream steps");
        sub->add_option("--model", f.only, "Comma-separated models or embedding sources to restrict the step to");
        sub->add_option("--metric", f.metric, "Distance for eval-knn: euclidean or leaf-overlap");
        sub->add_option("--k", f.k, "Comma-separated K list");
        sub->add_option("--top-n-families", f.top_n, "Families kept for family models");
        sub->add_option("--vocab-cap", f.vocab_cap, "Bag-of-words vocabulary cap");
        sub->add_flag("--with-family-feature", f.family_feature, "Include the GBDT variant with the family column");
        sub->add_option("--input", f.input, "EMBER JSONL corpus instead of the synthetic one");
        sub->add_option("--families", f.families, "Synthetic families");
        sub->add_option("--samples-per-family", f.samples, "Synthetic samples per family");
        sub->add_option("--overlap", f.overlap, "Synthetic family overlap in [0, 1]");
        sub->add_option("--duplicate-rate", f.duplicate_rate, "Synthetic duplicate-line rate");
        sub->add_option("--malformed-rate", f.malformed_rate, "Synthetic malformed-line rate");
        subs.emplace_back(sub, fn);
    }
    CLI11_PARSE(app, argc, argv);

    set_warning_sink([](const std::string& m) { std::cerr << "warning: " << m << '\n'; });
    try {
        const auto config = resolve(f);
        harness::RunOptions o;
        o.out = f.out;
        o.force = f.force;
        o.only = split_list(f.only);
        if (!f.metric.empty()) o.metric = f.metric;
        for (const auto& [sub, fn] : subs) {
            if (!sub->parsed()) continue;
            fn(config, o);
            std::cerr << sub->get_name() << ": done (" << o.out.string() << ")\n";
        }
    } catch (const Error& e) {
        std::cerr << nlohmann::json{{"error", error_code_name(e.code())}, {"message", e.what()}}.dump() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
        return 1;
    }
    return 0;
}
