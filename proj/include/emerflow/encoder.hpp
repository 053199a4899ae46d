#ifndef EMERFLOW_ENCODER_HPP
#define EMERFLOW_ENCODER_HPP

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "emerflow/common.hpp"
#include "emerflow/serialize.hpp"

namespace emerflow {

struct TextRepresentation {
    std::string item_id;
    std::vector<double> vector;  // unit L2 norm, or all-zero for empty text
};

// Representations keyed by item id; what the alignment and eval stages
// consume after the encode stage has run.
using RepresentationMap = std::map<std::string, std::vector<double>>;

class EncoderProvider {
public:
    virtual ~EncoderProvider() = default;
    virtual std::size_t dim() const = 0;
    virtual std::string id() const = 0;  // memo-cache key component
    virtual std::vector<double> encode(const std::string& text) = 0;
    // File-backed providers resolve by item id instead of text.
    virtual std::vector<double> represent(const std::string& item_id, const std::string& text) {
        (void)item_id;
        return encode(text);
    }
};

// ----------------------------- memoization -----------------------------

class RepresentationMemo {
public:
    const std::vector<double>* find(const std::string& provider_id, std::uint64_t text_hash) const {
        std::lock_guard<std::mutex> lock{mu_};
        auto it = memo_.find({provider_id, text_hash});
        return it == memo_.end() ? nullptr : &it->second;
    }
    void put(const std::string& provider_id, std::uint64_t text_hash, std::vector<double> v) {
        std::lock_guard<std::mutex> lock{mu_};
        memo_[{provider_id, text_hash}] = std::move(v);
    }

private:
    mutable std::mutex mu_;
    std::map<std::pair<std::string, std::uint64_t>, std::vector<double>> memo_;
};

// Runs the provider, validates the output and L2-normalizes it (the all-zero
// vector for empty text passes through). Memoized per (provider id, text hash).
inline TextRepresentation encode_item(EncoderProvider& provider, const SerializedText& s,
                                      RepresentationMemo* memo = nullptr) {
    const std::uint64_t text_hash = fnv1a64(s.text);
    if (memo != nullptr) {
        if (const auto* hit = memo->find(provider.id(), text_hash)) return {s.item_id, *hit};
    }
    std::vector<double> v = provider.represent(s.item_id, s.text);
    if (v.size() != provider.dim())
        fail("encoder " + provider.id() + " returned " + std::to_string(v.size()) +
             " values, expected " + std::to_string(provider.dim()));
    for (double x : v)
        if (!is_finite(x)) fail("encoder " + provider.id() + " produced a non-finite value");
    const double norm = l2_norm(v);
    if (norm > 0.0)
        for (double& x : v) x /= norm;
    if (memo != nullptr) memo->put(provider.id(), text_hash, v);
    return {s.item_id, std::move(v)};
}

// ----------------------------- hashed encoder -----------------------------

// Offline stand-in for a frozen text encoder: lowercased alphanumeric
// tokens, each mapped by a seeded hash to a fixed pseudo-random unit
// vector; the text maps to the mean of its token vectors.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

class HashedEncoder : public EncoderProvider {
public:
    HashedEncoder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
        if (dim < 8) fail("hashed encoder: dim must be >= 8");
    }

    std::size_t dim() const override { return dim_; }
    std::string id() const override {
        return "hash:dim=" + std::to_string(dim_) + ":seed=" + std::to_string(seed_);
    }

    std::vector<double> encode(const std::string& text) override {
        const auto tokens = tokenize(text);
        std::vector<double> mean(dim_, 0.0);
        if (tokens.empty()) return mean;
        std::vector<double> tok(dim_);
        for (const auto& t : tokens) {
            token_vector(t, tok);
            for (std::size_t i = 0; i < dim_; ++i) mean[i] += tok[i];
        }
        const double inv = 1.0 / static_cast<double>(tokens.size());
        for (double& x : mean) x *= inv;
        return mean;
    }

    void token_vector(const std::string& token, std::vector<double>& out) const {
        Rng rng{seed_ ^ fnv1a64(token)};
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) {
            out[i] = rng.normal();
            norm_sq += out[i] * out[i];
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::size_t i = 0; i < dim_; ++i) out[i] *= inv;
    }

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

// ----------------------------- representation cache file -----------------------------

// First line `dim=<d_r>`, then `item_id,v1,...,vd` rows at 9 significant
// digits.
inline void write_representation_cache(const std::string& path, std::size_t dim,
                                       const std::vector<TextRepresentation>& reps) {
    std::string out = "dim=" + std::to_string(dim) + "\n";
    for (const auto& r : reps) {
        if (r.vector.size() != dim)
            fail("representation for " + r.item_id + " has dim " + std::to_string(r.vector.size()) +
                 ", expected " + std::to_string(dim));
        out += r.item_id;
        for (double v : r.vector) {
            out += ',';
            out += format_sig9(v);
        }
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::pair<std::size_t, RepresentationMap> load_representation_cache(const std::string& path) {
    std::istringstream in{read_text_file(path)};
    std::string line;
    if (!std::getline(in, line)) fail(path + ": empty representation cache");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("dim=", 0) != 0) fail(path + ": first line must be `dim=<d>`");
    const std::size_t dim =
        static_cast<std::size_t>(detail::parse_int(line.substr(4), path + " header"));
    RepresentationMap reps;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cols = split(line, ',');
        if (cols.size() != dim + 1)
            fail(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                 " values, got " + std::to_string(cols.size() - 1));
        std::vector<double> v(dim);
        for (std::size_t i = 0; i < dim; ++i)
            v[i] = detail::parse_double(cols[i + 1], path + ":" + std::to_string(lineno));
        reps[cols[0]] = std::move(v);
    }
    return {dim, std::move(reps)};
}

// ----------------------------- file encoder -----------------------------

// Serves representations precomputed by an external frozen model.
class FileEncoder : public EncoderProvider {
public:
    explicit FileEncoder(const std::string& path) : path_(path) {
        auto [dim, reps] = load_representation_cache(path);
        dim_ = dim;
        reps_ = std::move(reps);
    }

    std::size_t dim() const override { return dim_; }
    std::string id() const override { return "file:" + path_; }

    std::vector<double> encode(const std::string&) override {
        fail("file encoder cannot encode raw text; it resolves item ids only");
    }

    std::vector<double> represent(const std::string& item_id, const std::string&) override {
        auto it = reps_.find(item_id);
        if (it == reps_.end()) fail("file encoder: no representation for item " + item_id);
        return it->second;
    }

private:
    std::string path_;
    std::size_t dim_ = 0;
    RepresentationMap reps_;
};

inline std::unique_ptr<EncoderProvider> hashed_encoder(std::size_t dim, std::uint64_t seed) {
    return std::make_unique<HashedEncoder>(dim, seed);
}

inline std::unique_ptr<EncoderProvider> file_encoder(const std::string& path) {
    return std::make_unique<FileEncoder>(path);
}

}  // namespace emerflow

#endif  // EMERFLOW_ENCODER_HPP
