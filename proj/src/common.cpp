#include "malsim/common.hpp"

#include <array>
#include <charconv>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <numbers>
#include <thread>

namespace malsim {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::io: return "io";
        case ErrorCode::empty_corpus: return "empty_corpus";
        case ErrorCode::config: return "config";
        case ErrorCode::vectorization: return "vectorization";
        case ErrorCode::training: return "training";
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::numeric_overflow: return "numeric_overflow";
        case ErrorCode::undefined_metric: return "undefined_metric";
        case ErrorCode::kind_mismatch: return "kind_mismatch";
        case ErrorCode::unknown_id: return "unknown_id";
        case ErrorCode::fold_construction: return "fold_construction";
        case ErrorCode::missing_artifact: return "missing_artifact";
        case ErrorCode::hash_mismatch: return "hash_mismatch";
    }
    return "unknown";
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_)
        throw Error(ErrorCode::dimension_mismatch,
                    "row of width " + std::to_string(values.size()) + " appended to matrix of width " +
                        std::to_string(cols_));
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
    // 53 high bits -> [0, 1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::below(std::size_t n) {
    if (n <= 1) return 0;
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        std::uint64_t r = engine_();
        if (r >= threshold) return static_cast<std::size_t>(r % bound);
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t worker_count() {
    const char* env = std::getenv("MALSIM_THREADS");
    if (env == nullptr) return 1;
    char* end = nullptr;
    long n = std::strtol(env, &end, 10);
    if (end == env || n < 1) return 1;
    return static_cast<std::size_t>(n);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string format_fixed(double value) {
    if (!std::isfinite(value)) {
        if (std::isnan(value)) return "nan";
        return value > 0 ? "inf" : "-inf";
    }
    if (value == 0.0) return "0";
    std::array<char, 512> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::fixed);
    return std::string(buf.data(), res.ptr);
}

std::string format_decimals(double value, int decimals) {
    if (!std::isfinite(value)) return format_fixed(value);
    std::array<char, 512> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::fixed,
                             decimals);
    std::string out(buf.data(), res.ptr);
    if (out.starts_with('-') && out.find_first_not_of("-0.") == std::string::npos) out.erase(0, 1);
    return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

namespace {
std::mutex g_sink_mutex;
std::function<void(const std::string&)>& sink() {
    static std::function<void(const std::string&)> s = [](const std::string& m) {
        std::cerr << "warning: " << m << '\n';
    };
    return s;
}
}  // namespace

void log_warning(const std::string& message) {
    std::lock_guard lock(g_sink_mutex);
    if (sink()) sink()(message);
}

void set_warning_sink(std::function<void(const std::string&)> s) {
    std::lock_guard lock(g_sink_mutex);
    sink() = std::move(s);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

double parse_csv_double(const std::string& s, const std::string& context) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw Error(ErrorCode::io, context + ": bad numeric field '" + s + "'");
    return v;
}


}  // namespace malsim
