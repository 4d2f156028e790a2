// Prints one line per acceptance criterion and exits nonzero on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "brute_force.hpp"
#include "malsim/harness.hpp"
#include "malsim/metrics.hpp"
#include "malsim/similarity.hpp"

using namespace malsim;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    enum { pass, fail, skip } status = fail;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

struct SuiteRun {
    int exit_code = -1;
    int cases = 0;
};

SuiteRun run_suite(const std::string& binary, const std::string& filter = "") {
    std::string cmd = std::string(MALSIM_TEST_BIN_DIR) + "/" + binary;
    if (!filter.empty()) cmd += " \"--test-case=" + filter + "\"";
    cmd += " 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return {};
    std::string text;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) text += buf;
    const int raw = pclose(pipe);
    SuiteRun r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    const auto at = text.find("test cases:");
    if (at != std::string::npos) r.cases = std::atoi(text.c_str() + at + 11);
    return r;
}

Matrix gaussian(std::size_t n, std::size_t d, Rng& rng) {
    Matrix m(n, d);
    for (auto& v : m.data()) v = rng.normal();
    return m;
}

double rel(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

Outcome metric_oracles() {
    const auto t0 = Clock::now();
    Rng rng(8675309);
    double worst_cluster = 0, worst_auc = 0, worst_knn = 0, worst_dist = 0;
    const int instances = 24;
    for (int t = 0; t < instances; ++t) {
        const std::size_t n = 20 + rng.below(481), d = 1 + rng.below(16), k = 2 + rng.below(5);
        Matrix x = gaussian(n, d, rng);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i < k ? i : rng.below(k));
        for (std::size_t i = 0; i < n; ++i) x(i, 0) += 1.5 * y[i];
        worst_cluster = std::max({worst_cluster, rel(metrics::silhouette(x, y), brute::silhouette(x, y)),
                                  rel(metrics::davies_bouldin(x, y), brute::davies_bouldin(x, y)),
                                  rel(metrics::calinski_harabasz(x, y).value, brute::calinski_harabasz(x, y))});

        std::vector<int> yb(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            yb[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.below(2));
            s[i] = std::round(8 * rng.normal() + 4 * yb[i]) / 8;
        }
        worst_auc = std::max(worst_auc, std::abs(metrics::roc_auc_binary(yb, s) - brute::pair_auc(yb, s)));

        for (int p = 0; p < 20; ++p) {
            const std::size_t i = rng.below(n), j = rng.below(n);
            worst_dist = std::max(worst_dist, rel(similarity::euclidean_distance(x.row(i), x.row(j)),
                                                  brute::dist(x, i, brute::row_vec(x, j))));
        }

        auto set = std::make_shared<similarity::EmbeddingSet>();
        for (std::size_t i = 0; i < n; ++i) set->ids.push_back("q" + std::to_string(rng.below(1u << 30)) + "_" + std::to_string(i));
        set->vectors = x;
        set->labels_binary = yb;
        const similarity::BruteForceIndex index(set, similarity::Metric::euclidean);
        const std::vector<std::size_t> ks{1, 10};
        const auto r = similarity::label_homogeneity_at_k(index, ks);
        for (std::size_t q = 0; q < ks.size(); ++q) {
            const auto want = brute::homogeneity(x, yb, set->ids, ks[q]);
            worst_knn = std::max({worst_knn, std::abs(r.rows[q].benign.mean - want.benign_mean),
                                  std::abs(r.rows[q].malicious.mean - want.malicious_mean),
                                  std::abs(r.rows[q].all.mean - want.all_mean),
                                  std::abs(r.rows[q].all.std - want.all_std)});
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = worst_cluster < 1e-9 && worst_knn < 1e-9 && worst_auc < 1e-12 && worst_dist < 1e-12 && secs < 60;
    return {ok ? Outcome::pass : Outcome::fail,
            std::to_string(instances) + " instances; max error clustering " + fmt(worst_cluster) + ", homogeneity " +
                fmt(worst_knn) + ", AUC " + fmt(worst_auc) + ", distance " + fmt(worst_dist) + "; " + fmt(secs, 3) +
                " s"};
}

Outcome suite_check(const std::string& binary, const std::string& filter, double limit_seconds) {
    const auto t0 = Clock::now();
    const auto r = run_suite(binary, filter);
    const double secs = seconds_since(t0);
    const bool ok = r.exit_code == 0 && r.cases > 0 && (limit_seconds <= 0 || secs < limit_seconds);
    return {ok ? Outcome::pass : Outcome::fail, binary + " [" + filter + "]: " + std::to_string(r.cases) +
                                                    " test cases, exit " + std::to_string(r.exit_code) + "; " +
                                                    fmt(secs, 3) + " s"};
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

double all_mean_at(const fs::path& out, const std::string& source, std::size_t k) {
    const json report = read_json(out / "eval-knn" / (source + ".json"));
    for (const auto& row : report["rows"])
        if (row["k"] == k) return row["all"]["mean"].get<double>();
    throw std::runtime_error("no K=" + std::to_string(k) + " row for " + source);
}

harness::ExperimentConfig desk_config() {
    json j = json::object();
    j["synth"] = {{"n_families", 20}, {"samples_per_family", 200}, {"overlap", 0.3}};
    return harness::config_from_json(j);
}

Outcome directional(const fs::path& out, double secs) {
    const double raw = all_mean_at(out, "raw_features", 100);
    const double mlp = all_mean_at(out, "mlp_binary", 100);
    const double gbdt = all_mean_at(out, "gbdt_binary", 100);
    const double sil_raw = read_json(out / "eval-cluster" / "raw_features.json")["silhouette"].get<double>();
    const double sil_mlp = read_json(out / "eval-cluster" / "mlp_binary.json")["silhouette"].get<double>();
    const bool ok = mlp > raw && gbdt > raw && sil_mlp > sil_raw && secs < 900;
    return {ok ? Outcome::pass : Outcome::fail,
            "homogeneity@100 raw " + fmt(raw) + ", mlp_binary " + fmt(mlp) + ", gbdt_binary " + fmt(gbdt) +
                "; silhouette raw " + fmt(sil_raw) + ", mlp_binary " + fmt(sil_mlp) + "; run " + fmt(secs, 3) + " s"};
}

Outcome family_shortcut(const fs::path& out, const harness::ExperimentConfig& c) {
    bool ok = true;
    std::string detail;
    for (std::size_t k : c.k_list) {
        const double with = all_mean_at(out, "gbdt_binary_family", k);
        const double without = all_mean_at(out, "gbdt_binary", k);
        ok = ok && with > without;
        detail += (detail.empty() ? "" : ", ") + std::string("K=") + std::to_string(k) + " " + fmt(with) + " vs " +
                  fmt(without);
    }
    return {ok ? Outcome::pass : Outcome::fail, detail};
}

Outcome full_scale() {
    const char* input = std::getenv("MALSIM_EMBER_JSONL");
    if (input == nullptr || *input == '\0')
        return {Outcome::skip, "set MALSIM_EMBER_JSONL to an EMBER 2018 + AVClass JSONL corpus to run this profile"};
    json j = json::object();
    j["input"] = input;
    j["models"] = {"gbdt_binary", "gbdt_family"};
    j["sources"] = json::array();
    const auto c = harness::config_from_json(j);
    harness::RunOptions o;
    o.out = fs::temp_directory_path() / "malsim_acceptance_full";
    fs::remove_all(o.out);
    harness::cmd_preprocess(c, o);
    harness::cmd_train(c, o);
    harness::cmd_eval_classify(c, o);
    const double bin = read_json(o.out / "eval-classify" / "gbdt_binary.json")["accuracy"].get<double>();
    const double fam = read_json(o.out / "eval-classify" / "gbdt_family.json")["accuracy"].get<double>();
    const bool ok = std::abs(bin - 0.9776) <= 0.02 && std::abs(fam - 0.9055) <= 0.03;
    return {ok ? Outcome::pass : Outcome::fail,
            "binary accuracy " + fmt(bin) + " (target 0.9776 +/- 0.02), family accuracy " + fmt(fam) +
                " (target 0.9055 +/- 0.03)"};
}

std::map<std::string, std::string> report_files(const fs::path& out) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(out / "report")) {
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        files[e.path().filename().string()] = s.str();
    }
    return files;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
    const auto fa = report_files(a), fb = report_files(b);
    std::string differing;
    for (const auto& [name, text] : fa) {
        auto it = fb.find(name);
        if (it == fb.end() || it->second != text) differing += " " + name;
    }
    if (fa.size() != fb.size()) differing += " (file sets differ)";
    return {differing.empty() ? Outcome::pass : Outcome::fail,
            differing.empty() ? std::to_string(fa.size()) + " report files byte-identical across two runs"
                              : "differing:" + differing};
}

Outcome invariant_suites() {
    std::string failed;
    int cases = 0;
    for (const char* suite : {"test_common", "test_features", "test_gbdt", "test_neural", "test_similarity",
                              "test_metrics", "test_harness"}) {
        const auto r = run_suite(suite);
        cases += r.cases;
        if (r.exit_code != 0 || r.cases == 0) failed += std::string(" ") + suite;
    }
    return {failed.empty() ? Outcome::pass : Outcome::fail,
            failed.empty() ? std::to_string(cases) + " test cases across 7 suites pass" : "failing:" + failed};
}

}  // namespace

int main() {
    set_warning_sink([](const std::string&) {});
    const fs::path root = fs::temp_directory_path() / "malsim_acceptance";
    fs::remove_all(root);

    std::map<int, std::function<Outcome()>> checks;
    checks[1] = metric_oracles;
    checks[2] = [] { return suite_check("test_neural", "gradients*", 60); };
    checks[3] = [] {
        return suite_check("test_gbdt", "property: leaf weights*,property: training-loss monotone over 100 rounds*", 0);
    };

    const auto config = desk_config();
    double first_run = 0;
    bool runs_ok = true;
    std::string run_error;
    auto run = [&](const fs::path& out) {
        harness::RunOptions o;
        o.out = out;
        const auto t0 = Clock::now();
        harness::run_all(config, o);
        return seconds_since(t0);
    };
    checks[4] = [&]() -> Outcome {
        try {
            first_run = run(root / "a");
        } catch (const std::exception& e) {
            runs_ok = false;
            run_error = e.what();
            return {Outcome::fail, std::string("pipeline failed: ") + e.what()};
        }
        return directional(root / "a", first_run);
    };
    checks[5] = [&]() -> Outcome {
        if (!runs_ok) return {Outcome::fail, "pipeline failed: " + run_error};
        return family_shortcut(root / "a", config);
    };
    checks[6] = full_scale;
    checks[7] = [&]() -> Outcome {
        if (!runs_ok) return {Outcome::fail, "pipeline failed: " + run_error};
        run(root / "b");
        return determinism(root / "a", root / "b");
    };
    checks[8] = invariant_suites;

    int failures = 0;
    for (auto& [id, check] : checks) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {Outcome::fail, e.what()};
        }
        const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::skip ? "SKIP" : "FAIL";
        if (o.status == Outcome::fail) ++failures;
        std::cout << "criterion " << id << ": " << tag << " - " << o.detail << std::endl;
    }
    fs::remove_all(root);
    return failures == 0 ? 0 : 1;
}
