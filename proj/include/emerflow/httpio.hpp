#ifndef EMERFLOW_HTTPIO_HPP
#define EMERFLOW_HTTPIO_HPP

#include <chrono>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "emerflow/augment.hpp"
#include "emerflow/common.hpp"
#include "emerflow/encoder.hpp"
#include "emerflow/serialize.hpp"

namespace emerflow {

namespace detail {

struct ParsedUrl {
    std::string host;
    int port = 80;
    std::string path = "/";
};

inline ParsedUrl parse_http_url(const std::string& url) {
    const std::string prefix = "http://";
    if (url.rfind(prefix, 0) != 0) fail("only http:// endpoints are supported: " + url);
    std::string rest = url.substr(prefix.size());
    ParsedUrl out;
    const auto slash = rest.find('/');
    std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
    if (slash != std::string::npos) out.path = rest.substr(slash);
    const auto colon = hostport.find(':');
    if (colon == std::string::npos) {
        out.host = hostport;
    } else {
        out.host = hostport.substr(0, colon);
        out.port = static_cast<int>(parse_int(hostport.substr(colon + 1), url));
    }
    if (out.host.empty()) fail("bad endpoint url: " + url);
    return out;
}

inline void apply_timeout(httplib::Client& client, std::chrono::milliseconds timeout) {
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
}

}  // namespace detail

// ----------------------------- augmentation over http -----------------------------

// POST {"prompt": ...} -> {"text": ...}. Transport failures retry with
// exponential backoff up to max_retries; a response that is not the
// expected JSON is an error carrying the raw body.
class HttpAugmentationProvider : public AugmentationProvider {
public:
    explicit HttpAugmentationProvider(HttpProviderConfig config) : config_(std::move(config)) {
        if (config_.endpoint.empty()) fail("http provider: endpoint not configured");
    }

    std::string name() const override { return "http:" + config_.endpoint; }

    std::vector<std::string> propose(const std::string& item_type) override {
        const std::string prompt = render_template(
            config_.propose_template,
            {{"item_type", item_type}, {"raw_features", raw_features_hint_}});
        const std::string text = post_prompt(prompt);
        return detail::parse_propose_response(text);
    }

    AugmentedFeatureSet fill(const Item& item, const AugmentationSchema& schema) override {
        std::string features;
        for (const auto& f : item.features) {
            if (!features.empty()) features += '\n';
            features += f.name + ": " + f.content;
        }
        std::string names;
        for (const auto& n : schema.feature_names) {
            if (!names.empty()) names += ", ";
            names += n;
        }
        const std::string prompt =
            render_template(config_.fill_template, {{"item_type", item.item_type},
                                                    {"item_id", item.id},
                                                    {"features", features},
                                                    {"schema", names}});
        const std::string text = post_prompt(prompt);
        return detail::parse_fill_response(text, item, schema);
    }

    // Raw feature names are rendered into the propose prompt when known.
    void set_raw_features_hint(const std::vector<std::string>& names) {
        raw_features_hint_.clear();
        for (const auto& n : names) {
            if (!raw_features_hint_.empty()) raw_features_hint_ += ", ";
            raw_features_hint_ += n;
        }
    }

private:
    std::string post_prompt(const std::string& prompt) {
        const auto url = detail::parse_http_url(config_.endpoint);
        httplib::Client client{url.host, url.port};
        detail::apply_timeout(client, config_.timeout);
        nlohmann::ordered_json body;
        body["prompt"] = prompt;
        const std::string payload = body.dump();

        std::string last_error;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                const auto delay = config_.backoff * (1 << (attempt - 1));
                std::this_thread::sleep_for(delay);
            }
            auto res = client.Post(url.path, payload, "application/json");
            if (!res) {
                last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
                continue;
            }
            if (res->status != 200) {
                last_error = "http status " + std::to_string(res->status);
                continue;
            }
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(res->body);
            } catch (const std::exception&) {
                fail("http provider: non-parseable response from " + config_.endpoint + ": " +
                     res->body);
            }
            if (!j.contains("text") || !j["text"].is_string())
                fail("http provider: response missing `text` from " + config_.endpoint + ": " +
                     res->body);
            return j["text"].get<std::string>();
        }
        fail("http provider: " + last_error + " after " + std::to_string(config_.max_retries + 1) +
             " attempts against " + config_.endpoint);
    }

    HttpProviderConfig config_;
    std::string raw_features_hint_;
};

inline std::unique_ptr<AugmentationProvider> http_provider(HttpProviderConfig config) {
    return std::make_unique<HttpAugmentationProvider>(std::move(config));
}

// ----------------------------- embedding over http -----------------------------

// POST {"text": ...} -> {"vector": [...]}. Results are written through to a
// representation-cache file when one is configured; repeated texts never
// reach the network.
class HttpEncoder : public EncoderProvider {
public:
    HttpEncoder(std::string endpoint, std::size_t dim, std::chrono::milliseconds timeout,
                std::string cache_path = {})
        : endpoint_(std::move(endpoint)), dim_(dim), timeout_(timeout),
          cache_path_(std::move(cache_path)) {
        if (dim_ == 0) fail("http encoder: dim must be positive");
        if (!cache_path_.empty() && std::filesystem::exists(cache_path_)) {
            auto [cached_dim, reps] = load_representation_cache(cache_path_);
            if (cached_dim != dim_)
                fail("http encoder: cache " + cache_path_ + " has dim " +
                     std::to_string(cached_dim) + ", expected " + std::to_string(dim_));
            by_item_ = std::move(reps);
        }
    }

    std::size_t dim() const override { return dim_; }
    std::string id() const override { return "http:" + endpoint_ + ":dim=" + std::to_string(dim_); }

    std::vector<double> encode(const std::string& text) override {
        const std::uint64_t th = fnv1a64(text);
        auto hit = by_text_.find(th);
        if (hit != by_text_.end()) return hit->second;

        const auto url = detail::parse_http_url(endpoint_);
        httplib::Client client{url.host, url.port};
        detail::apply_timeout(client, timeout_);
        nlohmann::ordered_json body;
        body["text"] = text;
        auto res = client.Post(url.path, body.dump(), "application/json");
        if (!res)
            fail("http encoder: retryable transport failure (" + httplib::to_string(res.error()) +
                 ") endpoint=" + endpoint_ + " text_hash=" + hex64(th));
        if (res->status != 200)
            fail("http encoder: status " + std::to_string(res->status) + " endpoint=" + endpoint_ +
                 " text_hash=" + hex64(th));
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(res->body);
        } catch (const std::exception&) {
            fail("http encoder: non-parseable response: " + res->body);
        }
        if (!j.contains("vector") || !j["vector"].is_array())
            fail("http encoder: response missing `vector`: " + res->body);
        std::vector<double> v = j["vector"].get<std::vector<double>>();
        if (v.size() != dim_)
            fail("http encoder: response vector has length " + std::to_string(v.size()) +
                 ", expected " + std::to_string(dim_));
        for (double x : v)
            if (!is_finite(x)) fail("http encoder: non-finite value in response vector");
        by_text_[th] = v;
        return v;
    }

    std::vector<double> represent(const std::string& item_id, const std::string& text) override {
        auto hit = by_item_.find(item_id);
        if (hit != by_item_.end()) return hit->second;
        std::vector<double> v = encode(text);
        by_item_[item_id] = v;
        if (!cache_path_.empty()) append_cache_row(item_id, v);
        return v;
    }

private:
    void append_cache_row(const std::string& item_id, const std::vector<double>& v) {
        if (!std::filesystem::exists(cache_path_))
            write_text_file(cache_path_, "dim=" + std::to_string(dim_) + "\n");
        std::ofstream out{cache_path_, std::ios::binary | std::ios::app};
        if (!out) fail("http encoder: cannot append to cache " + cache_path_);
        out << item_id;
        for (double x : v) out << ',' << format_sig9(x);
        out << '\n';
    }

    std::string endpoint_;
    std::size_t dim_;
    std::chrono::milliseconds timeout_;
    std::string cache_path_;
    RepresentationMap by_item_;
    std::map<std::uint64_t, std::vector<double>> by_text_;
};

inline std::unique_ptr<EncoderProvider> http_encoder(const std::string& endpoint, std::size_t dim,
                                                     std::chrono::milliseconds timeout,
                                                     const std::string& cache_path = {}) {
    return std::make_unique<HttpEncoder>(endpoint, dim, timeout, cache_path);
}

}  // namespace emerflow

#endif  // EMERFLOW_HTTPIO_HPP
