#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace malsim {

enum class ErrorCode {
    io,
    empty_corpus,
    config,
    vectorization,
    training,
    dimension_mismatch,
    numeric_overflow,
    undefined_metric,
    kind_mismatch,
    unknown_id,
    fold_construction,
    missing_artifact,
    hash_mismatch,
};

std::string_view error_code_name(ErrorCode code);

/// Every failure surfaced by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return rows_ == 0; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    void append_row(std::span<const double> values);
    Matrix select_rows(std::span<const std::size_t> indices) const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Seeded generator with platform-independent derived distributions.
/// std::uniform_*_distribution and std::normal_distribution are not specified
/// bit-for-bit, so the draws are derived from the raw 64-bit engine output.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    std::size_t below(std::size_t n);        // [0, n)
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Neumaier-compensated accumulator.
class CompensatedSum {
public:
    void add(double x) noexcept {
        double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

/// Worker count from MALSIM_THREADS; unset or invalid means 1.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) across worker_count() threads. fn must only write
/// to per-index state so results do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Shortest round-trip decimal in fixed notation (never exponent form).
std::string format_fixed(double value);
/// Fixed notation with a given number of decimals.
std::string format_decimals(double value, int decimals);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

/// Non-fatal diagnostics; the CLI forwards these to stderr.
void log_warning(const std::string& message);
void set_warning_sink(std::function<void(const std::string&)> sink);

/// CSV field quoting (RFC 4180 style) and the matching line splitter.
std::string csv_field(const std::string& s);
std::vector<std::string> split_csv_line(const std::string& line);
/// Strict full-field parse; `context` names the file in the error.
double parse_csv_double(const std::string& s, const std::string& context);

}  // namespace malsim
