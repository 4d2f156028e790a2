#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "malsim/harness.hpp"

namespace malsim::harness {

using nlohmann::json;

namespace {

constexpr std::size_t kHist = 256;
constexpr std::size_t kEntropy = 256;
constexpr std::size_t kPrintable = 96;
constexpr std::size_t kImportPool = 40;
constexpr std::size_t kExportPool = 6;
constexpr std::size_t kSectionPool = 3;
constexpr std::size_t kCommonImports = 60;
constexpr std::size_t kLabelDims = 64;

const std::vector<std::string>& scalar_paths() {
    static const std::vector<std::string> paths{
        "general.size",           "general.vsize",         "general.imports",        "general.exports",
        "general.symbols",        "general.has_debug",     "general.has_relocations", "general.has_resources",
        "general.has_signature",  "general.has_tls",       "header.coff.timestamp",   "header.optional.major_linker_version",
        "header.optional.sizeof_code", "header.optional.sizeof_headers", "strings.numstrings", "strings.avlength",
        "strings.printables",     "strings.entropy",       "strings.paths",           "strings.urls",
        "strings.registry",       "strings.MZ"};
    return paths;
}

struct Family {
    std::string name;
    bool malicious = false;
    std::vector<double> hist, entropy, printable, scalars;
    std::vector<std::string> imports, exports, sections;
};

std::string family_name(std::size_t f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "family_%02zu", f);
    return buf;
}

std::vector<double> normals(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

std::vector<Family> make_families(const SyntheticCorpusSpec& spec, Rng& rng) {
    std::vector<Family> fams(spec.n_families);
    for (std::size_t f = 0; f < spec.n_families; ++f) {
        Family& fam = fams[f];
        fam.name = family_name(f);
        fam.malicious = spec.malicious.empty() ? (f % 2 == 1) : spec.malicious[f];
        fam.hist = normals(rng, kHist);
        fam.entropy = normals(rng, kEntropy);
        fam.printable = normals(rng, kPrintable);
        fam.scalars = normals(rng, scalar_paths().size());
        for (std::size_t j = 0; j < kImportPool; ++j)
            fam.imports.push_back("f" + std::to_string(f) + "lib" + std::to_string(j % 4) + ".dll:fn" + std::to_string(j));
        for (std::size_t j = 0; j < kExportPool; ++j)
            fam.exports.push_back("export_f" + std::to_string(f) + "_" + std::to_string(j));
        for (std::size_t j = 0; j < kSectionPool; ++j)
            fam.sections.push_back(".f" + std::to_string(f) + "s" + std::to_string(j));
    }
    return fams;
}

double counted(double log_value, double scale) { return std::round(scale * std::exp(log_value)); }

void set_path(json& doc, const std::string& dotted, double value) {
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

std::string make_sha(Rng& rng) {
    std::string s;
    for (int i = 0; i < 4; ++i) s += hex64(rng.next_u64());
    return s;
}

json make_record(const std::vector<Family>& fams, std::size_t f, int label, const std::string& sha,
                 const SyntheticCorpusSpec& spec, Rng& rng) {
    const Family& own = fams[f];
    std::size_t donor_index = f;
    if (fams.size() > 1 && rng.bernoulli(spec.overlap / 2.0)) {
        donor_index = rng.below(fams.size() - 1);
        if (donor_index >= f) ++donor_index;
    }
    const Family& donor = fams[donor_index];
    const double sigma = 0.3 + 1.2 * spec.overlap;
    const double shift = own.malicious ? 0.35 : -0.35;

    json doc;
    doc["sha256"] = sha;
    doc["label"] = label;
    if (label == 1) doc["avclass"] = own.name;

    json hist = json::array(), entropy = json::array(), printable = json::array();
    for (std::size_t j = 0; j < kHist; ++j) hist.push_back(counted(donor.hist[j] + sigma * rng.normal(), 100.0));
    for (std::size_t j = 0; j < kEntropy; ++j) {
        const double s = j < kLabelDims ? shift : 0.0;
        entropy.push_back(counted(donor.entropy[j] + s + sigma * rng.normal(), 100.0));
    }
    for (std::size_t j = 0; j < kPrintable; ++j)
        printable.push_back(counted(donor.printable[j] + sigma * rng.normal(), 50.0));
    doc["histogram"] = std::move(hist);
    doc["byteentropy"] = std::move(entropy);

    const auto& paths = scalar_paths();
    for (std::size_t j = 0; j < paths.size(); ++j) {
        const double z = donor.scalars[j] + sigma * rng.normal();
        const bool flag = paths[j].find(".has_") != std::string::npos;
        set_path(doc, paths[j], flag ? (z > 0.0 ? 1.0 : 0.0) : counted(z, 20.0));
    }
    doc["strings"]["printabledist"] = std::move(printable);

    std::map<std::string, std::vector<std::string>> imports;
    const std::size_t n_imports = 15 + rng.below(10);
    for (std::size_t i = 0; i < n_imports; ++i) {
        std::string token;
        if (rng.bernoulli(0.7))
            token = donor.imports[rng.below(donor.imports.size())];
        else
            token = "KERNEL32.dll:Common" + std::to_string(rng.below(kCommonImports));
        const auto colon = token.find(':');
        imports[token.substr(0, colon)].push_back(token.substr(colon + 1));
    }
    doc["imports"] = imports;

    json exports = json::array();
    const std::size_t n_exports = rng.below(4);
    for (std::size_t i = 0; i < n_exports; ++i) exports.push_back(donor.exports[rng.below(donor.exports.size())]);
    doc["exports"] = std::move(exports);

    static const std::vector<std::string> props{"CNT_CODE", "CNT_INITIALIZED_DATA", "MEM_EXECUTE", "MEM_READ",
                                                "MEM_WRITE"};
    json sections = json::array();
    std::vector<std::string> names{".text", ".data", ".rdata", donor.sections[rng.below(donor.sections.size())]};
    for (const auto& name : names) {
        json sec;
        sec["name"] = name;
        sec["size"] = counted(rng.normal(), 4096.0);
        json p = json::array();
        for (const auto& prop : props)
            if (rng.bernoulli(0.5)) p.push_back(prop);
        sec["props"] = std::move(p);
        sections.push_back(std::move(sec));
    }
    doc["section"] = {{"entry", ".text"}, {"sections", std::move(sections)}};
    doc["datadirectories"] = json::array({{{"name", "EXPORT_TABLE"}, {"size", counted(donor.scalars[0], 64.0)}},
                                          {{"name", "IMPORT_TABLE"}, {"size", counted(donor.scalars[1], 64.0)}}});
    return doc;
}

std::string malformed_line(std::size_t variant, Rng& rng) {
    switch (variant % 3) {
        case 0: return R"({"sha256": ")" + make_sha(rng) + R"(", "label": 1, "histogram": [1, 2,)";
        case 1: return R"({"label": 0, "histogram": [1, 2, 3]})";
        default: return R"({"sha256": ")" + make_sha(rng) + R"(", "label": 0, "histogram": ["x", 2]})";
    }
}

}  // namespace

SynthCounts write_synthetic_corpus(const SyntheticCorpusSpec& spec, std::ostream& jsonl, std::ostream& truth) {
    if (spec.n_families == 0 || spec.samples_per_family == 0)
        throw Error(ErrorCode::config, "synthetic corpus needs at least one family and one sample per family");
    if (!spec.malicious.empty() && spec.malicious.size() != spec.n_families)
        throw Error(ErrorCode::config, "malicious assignment must list every family");
    for (double r : {spec.overlap, spec.duplicate_rate, spec.malformed_rate, spec.unlabeled_rate})
        if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorCode::config, "synthetic corpus rates must lie in [0, 1]");

    Rng rng(spec.seed);
    const auto fams = make_families(spec, rng);
    std::vector<std::size_t> order;
    for (std::size_t f = 0; f < spec.n_families; ++f)
        for (std::size_t s = 0; s < spec.samples_per_family; ++s) order.push_back(f);
    rng.shuffle(order);

    SynthCounts counts;
    std::vector<std::string> emitted;
    truth << "sha256,label,family\n";
    for (std::size_t f : order) {
        int label = fams[f].malicious ? 1 : 0;
        if (spec.unlabeled_rate > 0.0 && rng.bernoulli(spec.unlabeled_rate)) {
            label = -1;
            ++counts.unlabeled;
        }
        const std::string sha = make_sha(rng);
        std::string line = make_record(fams, f, label, sha, spec, rng).dump();
        jsonl << line << '\n';
        truth << sha << ',' << label << ',' << fams[f].name << '\n';
        ++counts.lines;
        ++counts.samples;
        if (spec.duplicate_rate > 0.0 && rng.bernoulli(spec.duplicate_rate)) {
            jsonl << (emitted.empty() ? line : emitted[rng.below(emitted.size())]) << '\n';
            ++counts.lines;
            ++counts.duplicates;
        }
        if (spec.malformed_rate > 0.0 && rng.bernoulli(spec.malformed_rate)) {
            jsonl << malformed_line(counts.malformed, rng) << '\n';
            ++counts.lines;
            ++counts.malformed;
        }
        emitted.push_back(std::move(line));
    }
    return counts;
}

json to_json(const SyntheticCorpusSpec& s) {
    json j{{"n_families", s.n_families},
           {"samples_per_family", s.samples_per_family},
           {"overlap", s.overlap},
           {"duplicate_rate", s.duplicate_rate},
           {"malformed_rate", s.malformed_rate},
           {"unlabeled_rate", s.unlabeled_rate},
           {"seed", s.seed}};
    j["malicious"] = s.malicious;
    return j;
}

SyntheticCorpusSpec synth_spec_from_json(const json& j) {
    SyntheticCorpusSpec s;
    for (const auto& [key, value] : j.items()) {
        if (key == "n_families") s.n_families = value.get<std::size_t>();
        else if (key == "samples_per_family") s.samples_per_family = value.get<std::size_t>();
        else if (key == "overlap") s.overlap = value.get<double>();
        else if (key == "duplicate_rate") s.duplicate_rate = value.get<double>();
        else if (key == "malformed_rate") s.malformed_rate = value.get<double>();
        else if (key == "unlabeled_rate") s.unlabeled_rate = value.get<double>();
        else if (key == "seed") s.seed = value.get<std::uint64_t>();
        else if (key == "malicious") s.malicious = value.get<std::vector<bool>>();
        else throw Error(ErrorCode::config, "unknown synth key '" + key + "'");
    }
    return s;
}

}  // namespace malsim::harness
