#pragma once

#include <optional>
#include <sstream>

#include "malsim/features.hpp"
#include "malsim/harness.hpp"

namespace testsupport {

using malsim::Matrix;
using malsim::Rng;

/// Synthetic EMBER-shaped corpus pushed through the full feature pipeline.
inline malsim::features::PreparedDataset synthetic_dataset(std::size_t families, std::size_t per_family,
                                                           double overlap, std::uint64_t seed,
                                                           std::size_t vocab_cap = 256) {
    malsim::harness::SyntheticCorpusSpec spec;
    spec.n_families = families;
    spec.samples_per_family = per_family;
    spec.overlap = overlap;
    spec.seed = seed;
    std::stringstream jsonl, truth;
    malsim::harness::write_synthetic_corpus(spec, jsonl, truth);
    malsim::features::PipelineConfig pc;
    pc.vocab_cap = vocab_cap;
    pc.seed = seed;
    return malsim::features::prepare_dataset(malsim::features::parse_records(jsonl).records, pc);
}

/// Isotropic Gaussian blobs around the given centers.
inline Matrix blobs(const std::vector<std::vector<double>>& centers, std::size_t per_blob, double sigma, Rng& rng,
                    std::vector<int>& labels) {
    Matrix x;
    labels.clear();
    for (std::size_t c = 0; c < centers.size(); ++c)
        for (std::size_t i = 0; i < per_blob; ++i) {
            std::vector<double> row(centers[c].size());
            for (std::size_t j = 0; j < row.size(); ++j) row[j] = centers[c][j] + sigma * rng.normal();
            x.append_row(row);
            labels.push_back(static_cast<int>(c));
        }
    return x;
}

inline Matrix random_matrix(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
    Matrix m(n, d);
    for (auto& v : m.data()) v = scale * rng.normal();
    return m;
}

template <typename F>
std::optional<malsim::ErrorCode> error_code_of(F&& f) {
    try {
        f();
    } catch (const malsim::Error& e) {
        return e.code();
    }
    return std::nullopt;
}

}  // namespace testsupport
