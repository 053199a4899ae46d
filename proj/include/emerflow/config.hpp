#ifndef EMERFLOW_CONFIG_HPP
#define EMERFLOW_CONFIG_HPP

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "emerflow/backbone.hpp"
#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"
#include "emerflow/eval.hpp"
#include "emerflow/meta.hpp"
#include "emerflow/serialize.hpp"

namespace emerflow {

struct PathsConfig {
    std::string interactions, items, targets;
    std::string out_dir = "out";
    std::string augment_cache;         // default: <out_dir>/augment_cache.jsonl
    std::string representation_cache;  // default: <out_dir>/representations.txt
    std::string backbone_checkpoint;   // default: <out_dir>/backbone.ckpt
    std::string align_checkpoint;      // default: <out_dir>/align.ckpt
};

struct TaskConfig {
    int n_support = 20;
    int n_query = 40;
};

struct EncoderConfig {
    std::string kind = "hash";  // hash | file | http
    int dim = 256;
    std::string endpoint;
    std::string source;  // representation file for kind=file
    int timeout_ms = 10000;
};

struct AugmentStageConfig {
    std::string provider = "replay";  // replay | http
    std::string endpoint;
    int timeout_ms = 10000;
    int max_retries = 2;
    int backoff_ms = 250;
    std::string propose_template_path;
    std::string fill_template_path;
    int parallelism = 1;
};

struct SerializeConfig {
    std::string mode = "full";  // full | raw_only | augmented_only
    int max_chars = 4096;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string item_type = "item";
    PathsConfig paths;
    SplitConfig split;
    std::optional<double> binarize_threshold;
    bool do_sample_negatives = false;
    TaskConfig tasks;
    TrainConfig backbone;
    MetaConfig meta;
    EncoderConfig encoder;
    AugmentStageConfig augment;
    SerializeConfig serialize;
    std::string protocol = "rolling";
    double f1_threshold = 0.5;
    std::string aggregate_mode = "per_item";  // per_item | pooled
    SyntheticSpec synth;
    bool force = false;  // recompute stages whose stamps are up to date
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
    if (!j.is_object()) fail("config: " + context + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) fail("config: unknown key `" + key + "` in " + context);
}

template <typename T>
inline void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j, {"seed", "item_type", "paths", "split", "binarize_threshold",
                           "sample_negatives", "tasks", "backbone", "meta", "encoder", "augment",
                           "serialize", "protocol", "f1_threshold", "aggregate_mode", "synth"},
                       "top level");
    RunConfig cfg;
    detail::get_if(j, "seed", cfg.seed);
    detail::get_if(j, "item_type", cfg.item_type);

    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::check_keys(p, {"interactions", "items", "targets", "out_dir", "augment_cache",
                               "representation_cache", "backbone_checkpoint", "align_checkpoint"},
                           "paths");
        detail::get_if(p, "interactions", cfg.paths.interactions);
        detail::get_if(p, "items", cfg.paths.items);
        detail::get_if(p, "targets", cfg.paths.targets);
        detail::get_if(p, "out_dir", cfg.paths.out_dir);
        detail::get_if(p, "augment_cache", cfg.paths.augment_cache);
        detail::get_if(p, "representation_cache", cfg.paths.representation_cache);
        detail::get_if(p, "backbone_checkpoint", cfg.paths.backbone_checkpoint);
        detail::get_if(p, "align_checkpoint", cfg.paths.align_checkpoint);
    }
    if (cfg.paths.augment_cache.empty())
        cfg.paths.augment_cache = cfg.paths.out_dir + "/augment_cache.jsonl";
    if (cfg.paths.representation_cache.empty())
        cfg.paths.representation_cache = cfg.paths.out_dir + "/representations.txt";
    if (cfg.paths.backbone_checkpoint.empty())
        cfg.paths.backbone_checkpoint = cfg.paths.out_dir + "/backbone.ckpt";
    if (cfg.paths.align_checkpoint.empty())
        cfg.paths.align_checkpoint = cfg.paths.out_dir + "/align.ckpt";

    if (j.contains("split")) {
        const auto& s = j.at("split");
        detail::check_keys(s, {"N", "K", "negative_ratio"}, "split");
        detail::get_if(s, "N", cfg.split.N);
        detail::get_if(s, "K", cfg.split.K);
        detail::get_if(s, "negative_ratio", cfg.split.negative_ratio);
    }
    if (j.contains("binarize_threshold") && !j.at("binarize_threshold").is_null())
        cfg.binarize_threshold = j.at("binarize_threshold").get<double>();
    detail::get_if(j, "sample_negatives", cfg.do_sample_negatives);

    if (j.contains("tasks")) {
        const auto& t = j.at("tasks");
        detail::check_keys(t, {"n_support", "n_query"}, "tasks");
        detail::get_if(t, "n_support", cfg.tasks.n_support);
        detail::get_if(t, "n_query", cfg.tasks.n_query);
    }
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        detail::check_keys(b, {"embed_dim", "hidden", "epochs", "batch_size", "step"}, "backbone");
        detail::get_if(b, "embed_dim", cfg.backbone.embed_dim);
        if (b.contains("hidden")) {
            const auto h = b.at("hidden").get<std::vector<int>>();
            if (h.size() != 2) fail("config: backbone.hidden must have exactly 2 layers");
            cfg.backbone.hidden1 = h[0];
            cfg.backbone.hidden2 = h[1];
        }
        detail::get_if(b, "epochs", cfg.backbone.epochs);
        detail::get_if(b, "batch_size", cfg.backbone.batch_size);
        detail::get_if(b, "step", cfg.backbone.step);
    }
    if (j.contains("meta")) {
        const auto& m = j.at("meta");
        detail::check_keys(m, {"alpha", "inner_step", "inner_steps", "outer_step", "batch_tasks",
                               "epochs", "first_order", "hidden"},
                           "meta");
        detail::get_if(m, "alpha", cfg.meta.alpha);
        detail::get_if(m, "inner_step", cfg.meta.inner_step);
        detail::get_if(m, "inner_steps", cfg.meta.inner_steps);
        detail::get_if(m, "outer_step", cfg.meta.outer_step);
        detail::get_if(m, "batch_tasks", cfg.meta.batch_tasks);
        detail::get_if(m, "epochs", cfg.meta.epochs);
        detail::get_if(m, "first_order", cfg.meta.first_order);
        detail::get_if(m, "hidden", cfg.meta.hidden);
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::check_keys(e, {"kind", "dim", "endpoint", "source", "timeout_ms"}, "encoder");
        detail::get_if(e, "kind", cfg.encoder.kind);
        detail::get_if(e, "dim", cfg.encoder.dim);
        detail::get_if(e, "endpoint", cfg.encoder.endpoint);
        detail::get_if(e, "source", cfg.encoder.source);
        detail::get_if(e, "timeout_ms", cfg.encoder.timeout_ms);
    }
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        detail::check_keys(a, {"provider", "endpoint", "timeout_ms", "max_retries", "backoff_ms",
                               "propose_template", "fill_template", "parallelism"},
                           "augment");
        detail::get_if(a, "provider", cfg.augment.provider);
        detail::get_if(a, "endpoint", cfg.augment.endpoint);
        detail::get_if(a, "timeout_ms", cfg.augment.timeout_ms);
        detail::get_if(a, "max_retries", cfg.augment.max_retries);
        detail::get_if(a, "backoff_ms", cfg.augment.backoff_ms);
        detail::get_if(a, "propose_template", cfg.augment.propose_template_path);
        detail::get_if(a, "fill_template", cfg.augment.fill_template_path);
        detail::get_if(a, "parallelism", cfg.augment.parallelism);
    }
    if (j.contains("serialize")) {
        const auto& s = j.at("serialize");
        detail::check_keys(s, {"mode", "max_chars"}, "serialize");
        detail::get_if(s, "mode", cfg.serialize.mode);
        detail::get_if(s, "max_chars", cfg.serialize.max_chars);
    }
    detail::get_if(j, "protocol", cfg.protocol);
    detail::get_if(j, "f1_threshold", cfg.f1_threshold);
    detail::get_if(j, "aggregate_mode", cfg.aggregate_mode);
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::check_keys(s, {"n_items", "n_targets", "n_old", "n_new", "latent_dim", "noise"},
                           "synth");
        detail::get_if(s, "n_items", cfg.synth.n_items);
        detail::get_if(s, "n_targets", cfg.synth.n_targets);
        detail::get_if(s, "n_old", cfg.synth.n_old);
        detail::get_if(s, "n_new", cfg.synth.n_new);
        detail::get_if(s, "latent_dim", cfg.synth.latent_dim);
        detail::get_if(s, "noise", cfg.synth.noise);
    }

    // validation that does not need any file present
    cfg.split.validate();
    serialize_mode_from_string(cfg.serialize.mode);
    protocol_mode_from_string(cfg.protocol);
    if (cfg.encoder.kind != "hash" && cfg.encoder.kind != "file" && cfg.encoder.kind != "http")
        fail("config: encoder.kind must be hash|file|http");
    if (cfg.augment.provider != "replay" && cfg.augment.provider != "http")
        fail("config: augment.provider must be replay|http");
    if (cfg.aggregate_mode != "per_item" && cfg.aggregate_mode != "pooled")
        fail("config: aggregate_mode must be per_item|pooled");
    if (cfg.tasks.n_support <= 0 || cfg.tasks.n_query <= 0)
        fail("config: tasks.n_support and tasks.n_query must be positive");
    cfg.meta.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const std::exception& e) {
        fail("config " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

// Derived per-stage seeds: one global seed, independent named streams.
inline std::uint64_t stage_seed(const RunConfig& cfg, std::string_view stage) {
    return subseed(cfg.seed, stage);
}

// Digest of the semantic configuration: everything that can change results,
// nothing machine-local (no filesystem paths, timeouts or parallelism).
inline std::string config_digest(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["item_type"] = cfg.item_type;
    j["split"] = {{"N", cfg.split.N}, {"K", cfg.split.K}, {"negative_ratio", cfg.split.negative_ratio}};
    j["binarize_threshold"] =
        cfg.binarize_threshold ? nlohmann::ordered_json(*cfg.binarize_threshold)
                               : nlohmann::ordered_json(nullptr);
    j["sample_negatives"] = cfg.do_sample_negatives;
    j["tasks"] = {{"n_support", cfg.tasks.n_support}, {"n_query", cfg.tasks.n_query}};
    j["backbone"] = {{"embed_dim", cfg.backbone.embed_dim},
                     {"hidden", {cfg.backbone.hidden1, cfg.backbone.hidden2}},
                     {"epochs", cfg.backbone.epochs},
                     {"batch_size", cfg.backbone.batch_size},
                     {"step", cfg.backbone.step}};
    j["meta"] = {{"alpha", cfg.meta.alpha},
                 {"inner_step", cfg.meta.inner_step},
                 {"inner_steps", cfg.meta.inner_steps},
                 {"outer_step", cfg.meta.outer_step},
                 {"batch_tasks", cfg.meta.batch_tasks},
                 {"epochs", cfg.meta.epochs},
                 {"first_order", cfg.meta.first_order},
                 {"hidden", cfg.meta.hidden}};
    j["encoder"] = {{"kind", cfg.encoder.kind}, {"dim", cfg.encoder.dim},
                    {"endpoint", cfg.encoder.endpoint}};
    j["augment_provider"] = cfg.augment.provider;
    j["serialize"] = {{"mode", cfg.serialize.mode}, {"max_chars", cfg.serialize.max_chars}};
    j["protocol"] = cfg.protocol;
    j["f1_threshold"] = cfg.f1_threshold;
    j["aggregate_mode"] = cfg.aggregate_mode;
    j["synth"] = {{"n_items", cfg.synth.n_items},     {"n_targets", cfg.synth.n_targets},
                  {"n_old", cfg.synth.n_old},         {"n_new", cfg.synth.n_new},
                  {"latent_dim", cfg.synth.latent_dim}, {"noise", cfg.synth.noise}};
    return hex64(fnv1a64(j.dump()));
}

}  // namespace emerflow

#endif  // EMERFLOW_CONFIG_HPP
