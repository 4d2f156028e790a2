#include <cmath>
#include <fstream>
#include <istream>
#include <unordered_set>

#include "malsim/features.hpp"

namespace malsim::features {

using nlohmann::json;

namespace {

void read_numeric_array(const json& value, std::string_view field, std::vector<double>& out,
                        std::vector<std::string>& defects) {
    if (!value.is_array()) {
        defects.push_back(std::string(field) + " is not an array");
        return;
    }
    out.reserve(value.size());
    for (std::size_t i = 0; i < value.size(); ++i) {
        const json& v = value[i];
        if (!v.is_number()) {
            defects.push_back(std::string(field) + "[" + std::to_string(i) + "] is not numeric");
            out.push_back(0.0);
            continue;
        }
        out.push_back(v.get<double>());
    }
}

void read_string_array(const json& value, std::string_view field, std::vector<std::string>& out,
                       std::vector<std::string>& defects) {
    if (!value.is_array()) {
        defects.push_back(std::string(field) + " is not an array");
        return;
    }
    for (const json& v : value) {
        if (!v.is_string()) {
            defects.push_back(std::string(field) + " holds a non-string entry");
            continue;
        }
        out.push_back(v.get<std::string>());
    }
}

// Numeric and boolean leaves become dotted-path scalars. Arrays of objects
// carrying a string "name" are keyed by that name; other arrays are skipped.
void flatten_scalars(const json& node, const std::string& prefix, std::map<std::string, double>& out) {
    if (node.is_boolean()) {
        out[prefix] = node.get<bool>() ? 1.0 : 0.0;
    } else if (node.is_number()) {
        out[prefix] = node.get<double>();
    } else if (node.is_object()) {
        for (const auto& [key, child] : node.items()) flatten_scalars(child, prefix + "." + key, out);
    } else if (node.is_array()) {
        for (const json& item : node) {
            if (item.is_object() && item.contains("name") && item["name"].is_string())
                for (const auto& [key, child] : item.items())
                    if (key != "name")
                        flatten_scalars(child, prefix + "." + item["name"].get<std::string>() + "." + key, out);
        }
    }
}

void read_imports(const json& value, RawRecord& rec) {
    if (value.is_object()) {
        for (const auto& [library, functions] : value.items()) {
            if (!functions.is_array()) {
                rec.defects.push_back("imports." + library + " is not an array");
                continue;
            }
            for (const json& fn : functions) {
                if (!fn.is_string()) {
                    rec.defects.push_back("imports." + library + " holds a non-string entry");
                    continue;
                }
                rec.imports.push_back(library + ":" + fn.get<std::string>());
            }
        }
    } else {
        read_string_array(value, "imports", rec.imports, rec.defects);
    }
}

void read_sections(const json& section, RawRecord& rec) {
    if (!section.is_object() || !section.contains("sections")) return;
    const json& list = section["sections"];
    if (!list.is_array()) {
        rec.defects.push_back("section.sections is not an array");
        return;
    }
    for (const json& s : list) {
        if (!s.is_object()) {
            rec.defects.push_back("section entry is not an object");
            continue;
        }
        if (s.contains("name") && s["name"].is_string()) rec.section_properties.push_back(s["name"].get<std::string>());
        if (s.contains("props")) read_string_array(s["props"], "section.props", rec.section_properties, rec.defects);
    }
}

}  // namespace

std::optional<RawRecord> parse_record_line(std::string_view line) {
    json doc = json::parse(line.begin(), line.end(), nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded() || !doc.is_object()) return std::nullopt;
    auto sha = doc.find("sha256");
    if (sha == doc.end() || !sha->is_string() || sha->get<std::string>().empty()) return std::nullopt;

    RawRecord rec;
    rec.sha256 = sha->get<std::string>();

    if (auto it = doc.find("label"); it != doc.end() && !it->is_null()) {
        if (!it->is_number()) {
            rec.defects.emplace_back("label is not numeric");
        } else {
            double v = it->get<double>();
            if (v == 0.0)
                rec.label = Label::benign;
            else if (v == 1.0)
                rec.label = Label::malicious;
            else if (v == -1.0)
                rec.label = Label::unknown;
            else
                rec.defects.emplace_back("label outside {-1, 0, 1}");
        }
    }

    if (auto it = doc.find("avclass"); it != doc.end() && it->is_string() && !it->get<std::string>().empty())
        rec.avclass = it->get<std::string>();

    if (auto it = doc.find("histogram"); it != doc.end()) read_numeric_array(*it, "histogram", rec.histogram, rec.defects);
    if (auto it = doc.find("byteentropy"); it != doc.end())
        read_numeric_array(*it, "byteentropy", rec.byteentropy, rec.defects);

    if (auto it = doc.find("printabledist"); it != doc.end()) {
        read_numeric_array(*it, "printabledist", rec.printabledist, rec.defects);
    } else if (auto st = doc.find("strings"); st != doc.end() && st->is_object()) {
        if (auto pd = st->find("printabledist"); pd != st->end())
            read_numeric_array(*pd, "printabledist", rec.printabledist, rec.defects);
    }

    if (auto it = doc.find("imports"); it != doc.end()) read_imports(*it, rec);
    if (auto it = doc.find("exports"); it != doc.end()) read_string_array(*it, "exports", rec.exports, rec.defects);
    if (auto it = doc.find("section"); it != doc.end()) read_sections(*it, rec);
    if (auto it = doc.find("section_properties"); it != doc.end())
        read_string_array(*it, "section_properties", rec.section_properties, rec.defects);

    for (const char* key : {"general", "header", "datadirectories"})
        if (auto it = doc.find(key); it != doc.end()) flatten_scalars(*it, key, rec.header_fields);
    if (auto it = doc.find("strings"); it != doc.end() && it->is_object())
        for (const auto& [key, child] : it->items())
            if (key != "printabledist") flatten_scalars(child, "strings." + key, rec.header_fields);
    if (auto it = doc.find("header_fields"); it != doc.end() && it->is_object())
        for (const auto& [key, child] : it->items()) flatten_scalars(child, key, rec.header_fields);

    return rec;
}

ParseResult parse_records(std::istream& in) {
    ParseResult result;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        ++result.lines;
        if (auto rec = parse_record_line(line))
            result.records.push_back(std::move(*rec));
        else
            ++result.skipped;
    }
    if (in.bad()) throw Error(ErrorCode::io, "read failure while parsing JSONL stream");
    if (result.lines > 0 && result.records.empty())
        throw Error(ErrorCode::empty_corpus,
                    "no valid records among " + std::to_string(result.lines) + " lines");
    return result;
}

ParseResult parse_records_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
    return parse_records(in);
}

namespace {
bool arrays_valid(const RawRecord& r) {
    auto ok = [](const std::vector<double>& v) {
        for (double x : v)
            if (!std::isfinite(x) || x < 0.0) return false;
        return true;
    };
    if (!ok(r.histogram) || !ok(r.byteentropy) || !ok(r.printabledist)) return false;
    for (const auto& [k, v] : r.header_fields)
        if (!std::isfinite(v)) return false;
    return true;
}
}  // namespace

std::vector<RawRecord> clean_and_dedup(std::vector<RawRecord> records, CleanStats* stats) {
    CleanStats local;
    std::vector<RawRecord> out;
    out.reserve(records.size());
    std::unordered_set<std::string> seen;
    for (auto& r : records) {
        if (r.sha256.empty() || !r.defects.empty() || !arrays_valid(r)) {
            ++local.removed_malformed;
            continue;
        }
        if (!seen.insert(r.sha256).second) {
            ++local.removed_duplicates;
            continue;
        }
        out.push_back(std::move(r));
    }
    if (stats) *stats = local;
    return out;
}

}  // namespace malsim::features
