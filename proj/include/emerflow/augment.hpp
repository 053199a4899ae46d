#ifndef EMERFLOW_AUGMENT_HPP
#define EMERFLOW_AUGMENT_HPP

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"

namespace emerflow {

// ----------------------------- domain types -----------------------------

struct AugmentationSchema {
    std::string item_type;
    std::vector<std::string> feature_names;  // suggested additional features
};

struct AugmentedFeatureSet {
    std::string item_id;
    std::vector<FeatureValue> features;  // one entry per schema name, in order
};

// One schema per item type; the hash keys cached fills to the schema that
// produced them.
inline std::uint64_t schema_hash(const AugmentationSchema& schema) {
    std::uint64_t h = fnv1a64(schema.item_type);
    for (const auto& name : schema.feature_names) {
        h = fnv1a64("\x1f", h);
        h = fnv1a64(name, h);
    }
    return h;
}

class AugmentationProvider {
public:
    virtual ~AugmentationProvider() = default;
    virtual std::string name() const = 0;
    virtual std::vector<std::string> propose(const std::string& item_type) = 0;
    virtual AugmentedFeatureSet fill(const Item& item, const AugmentationSchema& schema) = 0;
};

// ----------------------------- replay cache -----------------------------

// Append-only JSON lines. Two record kinds:
//   {"item_type": ..., "feature_names": [...]}
//   {"key": {"item_id": ..., "schema_hash": "<hex64>"}, "features": [{"name","content"}...]}
class AugmentCache {
public:
    AugmentCache() = default;

    explicit AugmentCache(std::string path) : path_(std::move(path)) {
        if (!std::filesystem::exists(path_)) return;
        std::istringstream in{read_text_file(path_)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (trim(line).empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const std::exception& e) {
                fail(path_ + ":" + std::to_string(lineno) + ": bad cache line: " + e.what());
            }
            if (j.contains("item_type")) {
                AugmentationSchema schema;
                schema.item_type = j.at("item_type").get<std::string>();
                for (const auto& n : j.at("feature_names"))
                    schema.feature_names.push_back(n.get<std::string>());
                schemas_[schema.item_type] = std::move(schema);
            } else if (j.contains("key")) {
                AugmentedFeatureSet afs;
                afs.item_id = j.at("key").at("item_id").get<std::string>();
                const std::string hash = j.at("key").at("schema_hash").get<std::string>();
                for (const auto& f : j.at("features"))
                    afs.features.push_back(
                        {f.at("name").get<std::string>(), f.at("content").get<std::string>()});
                fills_[{afs.item_id, hash}] = std::move(afs);
            } else {
                fail(path_ + ":" + std::to_string(lineno) + ": unrecognized cache record");
            }
        }
    }

    const std::string& path() const { return path_; }

    std::optional<AugmentationSchema> schema_for(const std::string& item_type) const {
        std::lock_guard<std::mutex> lock{mu_};
        auto it = schemas_.find(item_type);
        if (it == schemas_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<AugmentedFeatureSet> lookup(const std::string& item_id,
                                              std::uint64_t schema_h) const {
        std::lock_guard<std::mutex> lock{mu_};
        auto it = fills_.find({item_id, hex64(schema_h)});
        if (it == fills_.end()) return std::nullopt;
        return it->second;
    }

    void put_schema(const AugmentationSchema& schema) {
        nlohmann::ordered_json j;
        j["item_type"] = schema.item_type;
        j["feature_names"] = schema.feature_names;
        std::lock_guard<std::mutex> lock{mu_};
        schemas_[schema.item_type] = schema;
        append(j.dump());
    }

    void put(const AugmentedFeatureSet& afs, std::uint64_t schema_h) {
        nlohmann::ordered_json j;
        j["key"] = nlohmann::ordered_json{{"item_id", afs.item_id}, {"schema_hash", hex64(schema_h)}};
        j["features"] = nlohmann::ordered_json::array();
        for (const auto& f : afs.features)
            j["features"].push_back(nlohmann::ordered_json{{"name", f.name}, {"content", f.content}});
        std::lock_guard<std::mutex> lock{mu_};
        fills_[{afs.item_id, hex64(schema_h)}] = afs;
        append(j.dump());
    }

    std::size_t fill_count() const {
        std::lock_guard<std::mutex> lock{mu_};
        return fills_.size();
    }

private:
    void append(const std::string& line) {
        if (path_.empty()) return;  // in-memory cache (tests)
        const auto parent = std::filesystem::path{path_}.parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        std::ofstream out{path_, std::ios::binary | std::ios::app};
        if (!out) fail("cannot append to cache: " + path_);
        out << line << '\n';
    }

    std::string path_;
    mutable std::mutex mu_;
    std::map<std::string, AugmentationSchema> schemas_;
    std::map<std::pair<std::string, std::string>, AugmentedFeatureSet> fills_;
};

// ----------------------------- operations -----------------------------

// Proposes the additional-feature schema for one item type. Suggestions are
// deduplicated case-insensitively against the raw feature names and against
// each other; the result is persisted so repeat calls are cache hits.
inline AugmentationSchema propose_schema(AugmentationProvider& provider, AugmentCache& cache,
                                         const std::string& item_type,
                                         const std::vector<std::string>& raw_feature_names) {
    if (item_type.empty()) fail("propose_schema: item_type must be non-empty");
    if (auto cached = cache.schema_for(item_type)) return *cached;

    const auto suggested = provider.propose(item_type);
    if (suggested.empty())
        fail("propose_schema: provider " + provider.name() + " returned no suggestions for `" +
             item_type + "`");

    std::set<std::string> taken;
    for (const auto& n : raw_feature_names) taken.insert(lower(n));
    AugmentationSchema schema;
    schema.item_type = item_type;
    for (const auto& raw : suggested) {
        const std::string name = trim(raw);
        if (name.empty()) continue;
        if (!taken.insert(lower(name)).second) continue;  // shadows raw or earlier suggestion
        schema.feature_names.push_back(name);
    }
    if (schema.feature_names.empty())
        fail("propose_schema: every suggestion for `" + item_type +
             "` collides with an existing feature name");
    cache.put_schema(schema);
    return schema;
}

// Fills the schema for one item, cache-first. The provider is only
// contacted on a miss; partial responses are padded with empty contents.
inline AugmentedFeatureSet augment_item(AugmentationProvider& provider, AugmentCache& cache,
                                        const Item& item, const AugmentationSchema& schema) {
    const std::uint64_t h = schema_hash(schema);
    if (auto cached = cache.lookup(item.id, h)) return *cached;

    const AugmentedFeatureSet raw = provider.fill(item, schema);
    AugmentedFeatureSet out;
    out.item_id = item.id;
    std::size_t missing = 0;
    for (const auto& name : schema.feature_names) {
        std::string content;
        bool found = false;
        for (const auto& f : raw.features) {
            if (lower(trim(f.name)) == lower(name)) {
                content = f.content;
                found = true;
                break;
            }
        }
        if (!found) ++missing;
        out.features.push_back({name, content});
    }
    if (missing > 0)
        log_warn("augment_item: provider " + provider.name() + " left " + std::to_string(missing) +
                 " of " + std::to_string(schema.feature_names.size()) + " features empty for item " +
                 item.id);
    cache.put(out, h);
    return out;
}

// ----------------------------- replay provider -----------------------------

// Serves only what a previous run recorded; any miss is an error. This is
// what makes test runs fully offline and deterministic.
class ReplayProvider : public AugmentationProvider {
public:
    explicit ReplayProvider(const std::string& cache_path) : cache_(cache_path) {}

    std::string name() const override { return "replay"; }

    std::vector<std::string> propose(const std::string& item_type) override {
        auto schema = cache_.schema_for(item_type);
        if (!schema)
            fail("replay provider: no recorded schema for item type `" + item_type + "`");
        return schema->feature_names;
    }

    AugmentedFeatureSet fill(const Item& item, const AugmentationSchema& schema) override {
        const std::uint64_t h = schema_hash(schema);
        auto afs = cache_.lookup(item.id, h);
        if (!afs)
            fail("replay provider: cache miss for item " + item.id + ", schema " + hex64(h));
        return *afs;
    }

private:
    AugmentCache cache_;
};

inline std::unique_ptr<AugmentationProvider> replay_provider(const std::string& cache_path) {
    if (!std::filesystem::exists(cache_path))
        fail("replay provider: cache file does not exist: " + cache_path);
    return std::make_unique<ReplayProvider>(cache_path);
}

// ----------------------------- prompt templates -----------------------------

// Default prompts. Overridable via external text files with the same
// {placeholders}, so runs stay auditable without a rebuild.
inline const char* kDefaultProposeTemplate =
    "You assist a recommendation system that must handle brand-new items with no\n"
    "interaction history yet.\n"
    "Item type: {item_type}\n"
    "Known attribute columns: {raw_features}\n"
    "List additional attributes of a {item_type} that are missing from the columns\n"
    "above but would help predict whether someone engages with it.\n"
    "Answer with one attribute name per line and nothing else.\n";

inline const char* kDefaultFillTemplate =
    "A new {item_type} has these known attributes:\n"
    "{features}\n"
    "Provide the following additional attributes for it. If it is unfamiliar,\n"
    "relate it to well-known similar ones and describe the connection.\n"
    "Attributes to provide: {schema}\n"
    "Answer one per line in the form `Name: value`.\n";

inline std::string render_template(std::string text,
                                   const std::map<std::string, std::string>& fields) {
    for (const auto& [key, value] : fields) {
        const std::string token = "{" + key + "}";
        std::size_t pos = 0;
        while ((pos = text.find(token, pos)) != std::string::npos) {
            text.replace(pos, token.size(), value);
            pos += value.size();
        }
    }
    return text;
}

// ----------------------------- http provider -----------------------------

struct HttpProviderConfig {
    std::string endpoint;  // http://host:port/path
    std::string propose_template = kDefaultProposeTemplate;
    std::string fill_template = kDefaultFillTemplate;
    std::chrono::milliseconds timeout{10000};
    int max_retries = 2;
    std::chrono::milliseconds backoff{250};  // doubles per retry
};

namespace detail {

// `name: content` lines; anything that does not match a schema name is
// ignored. The first match per name wins.
inline AugmentedFeatureSet parse_fill_response(const std::string& text, const Item& item,
                                               const AugmentationSchema& schema) {
    AugmentedFeatureSet out;
    out.item_id = item.id;
    std::map<std::string, std::string> found;
    std::istringstream in{text};
    std::string line;
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        const std::string name = lower(trim(line.substr(0, colon)));
        const std::string content = trim(line.substr(colon + 1));
        if (!found.count(name)) found[name] = content;
    }
    for (const auto& name : schema.feature_names) {
        auto it = found.find(lower(name));
        out.features.push_back({name, it == found.end() ? "" : it->second});
    }
    return out;
}

inline std::vector<std::string> parse_propose_response(const std::string& text) {
    std::vector<std::string> names;
    std::istringstream in{text};
    std::string line;
    while (std::getline(in, line)) {
        std::string name = trim(line);
        if (name.rfind("- ", 0) == 0) name = trim(name.substr(2));
        if (!name.empty()) names.push_back(name);
    }
    return names;
}

}  // namespace detail

// The HTTP-backed provider lives in httpio.hpp so the socket machinery is
// only pulled in where it is actually used.

}  // namespace emerflow

#endif  // EMERFLOW_AUGMENT_HPP
