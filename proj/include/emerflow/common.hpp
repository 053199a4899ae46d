#ifndef EMERFLOW_COMMON_HPP
#define EMERFLOW_COMMON_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace emerflow {

// ----------------------------- errors -----------------------------

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// ----------------------------- logging -----------------------------

enum class LogLevel : int { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel& log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("EMERFLOW_LOG");
        if (env == nullptr) return LogLevel::warn;
        std::string v{env};
        if (v == "error") return LogLevel::error;
        if (v == "warn") return LogLevel::warn;
        if (v == "info") return LogLevel::info;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::warn;
    }();
    return level;
}

inline void log(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    static std::mutex mu;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::lock_guard<std::mutex> lock{mu};
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_error(const std::string& msg) { log(LogLevel::error, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::warn, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log(LogLevel::debug, msg); }

// ----------------------------- hashing -----------------------------

// FNV-1a, the stable 64-bit hash used for sub-seeds, token hashing,
// cache keys and config digests. Never use std::hash for anything that
// lands in a file: it is not specified across implementations.
constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string{buf};
}

// Named sub-seed: one global seed fans out into independent streams.
inline std::uint64_t subseed(std::uint64_t seed, std::string_view name) {
    return seed ^ fnv1a64(name);
}

// ----------------------------- rng -----------------------------

// mt19937_64 is bit-specified by the standard; the distributions are not.
// All draws below are hand-rolled so results are reproducible across
// standard libraries and compilers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return state_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(state_() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), rejection sampled to avoid modulo bias
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) fail("Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = state_();
        while (x >= limit) x = state_();
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // k distinct indices from [0, n), in draw order
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
        if (k > n) fail("sample_indices: k > n");
        std::vector<std::size_t> pool(n);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + below(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

private:
    std::mt19937_64 state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ----------------------------- small utils -----------------------------

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string{s.substr(b, e - b)};
}

inline std::string lower(std::string_view s) {
    std::string out{s};
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.emplace_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

// %.9g: the precision used by the representation cache rows.
inline std::string format_sig9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string{buf};
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) fail("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    const auto parent = std::filesystem::path{path}.parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out{path, std::ios::binary | std::ios::trunc};
    if (!out) fail("cannot write file: " + path);
    out << content;
    if (!out) fail("write failed: " + path);
}

inline bool is_finite(double v) { return std::isfinite(v); }

inline double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace emerflow

#endif  // EMERFLOW_COMMON_HPP
