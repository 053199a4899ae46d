#ifndef EMERFLOW_PIPELINE_HPP
#define EMERFLOW_PIPELINE_HPP

#include <atomic>
#include <filesystem>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "emerflow/augment.hpp"
#include "emerflow/backbone.hpp"
#include "emerflow/config.hpp"
#include "emerflow/corpus.hpp"
#include "emerflow/encoder.hpp"
#include "emerflow/eval.hpp"
#include "emerflow/httpio.hpp"
#include "emerflow/meta.hpp"
#include "emerflow/serialize.hpp"

namespace emerflow {

// ----------------------------- output-dir lock -----------------------------

// Two CLI processes must not share an output directory. flock releases on
// process exit even after a crash.
class DirLock {
public:
    explicit DirLock(const std::string& out_dir) {
        std::filesystem::create_directories(out_dir);
        path_ = out_dir + "/.emerflow.lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) fail("cannot open lock file " + path_);
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            fd_ = -1;
            fail("output directory is locked by another process: " + path_);
        }
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

// ----------------------------- stage stamps -----------------------------

namespace detail {

inline std::string file_digest(const std::string& path) {
    return hex64(fnv1a64(read_text_file(path)));
}

inline std::string stamp_path(const RunConfig& cfg, const std::string& stage) {
    return cfg.paths.out_dir + "/stamps/" + stage + ".json";
}

inline nlohmann::ordered_json stamp_json(const RunConfig& cfg,
                                         const std::vector<std::string>& inputs,
                                         const std::vector<std::string>& outputs) {
    nlohmann::ordered_json j;
    j["config_digest"] = config_digest(cfg);
    j["inputs"] = nlohmann::ordered_json::object();
    for (const auto& p : inputs) j["inputs"][p] = file_digest(p);
    j["outputs"] = nlohmann::ordered_json::object();
    for (const auto& p : outputs) j["outputs"][p] = file_digest(p);
    return j;
}

// A stage is current when its recorded config digest and every input and
// output content hash still match.
inline bool stage_current(const RunConfig& cfg, const std::string& stage,
                          const std::vector<std::string>& inputs,
                          const std::vector<std::string>& outputs) {
    if (cfg.force) return false;
    const std::string path = stamp_path(cfg, stage);
    if (!std::filesystem::exists(path)) return false;
    for (const auto& p : inputs)
        if (!std::filesystem::exists(p)) return false;
    for (const auto& p : outputs)
        if (!std::filesystem::exists(p)) return false;
    try {
        const auto recorded = nlohmann::json::parse(read_text_file(path));
        return recorded == nlohmann::json(stamp_json(cfg, inputs, outputs));
    } catch (const std::exception&) {
        return false;
    }
}

inline void write_stamp(const RunConfig& cfg, const std::string& stage,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
    write_text_file(stamp_path(cfg, stage), stamp_json(cfg, inputs, outputs).dump(2) + "\n");
}

}  // namespace detail

// ----------------------------- shared loading -----------------------------

struct CorpusPaths {
    std::string dir, old_ids, new_ids, tasks, schedules;
};

inline CorpusPaths corpus_paths(const RunConfig& cfg) {
    CorpusPaths p;
    p.dir = cfg.paths.out_dir + "/corpus";
    p.old_ids = p.dir + "/old_ids.txt";
    p.new_ids = p.dir + "/new_ids.txt";
    p.tasks = p.dir + "/tasks.jsonl";
    p.schedules = p.dir + "/schedules.jsonl";
    return p;
}

inline Corpus load_corpus(const RunConfig& cfg) {
    Corpus corpus = ingest(cfg.paths.interactions, cfg.paths.items, cfg.paths.targets,
                           cfg.binarize_threshold, cfg.item_type);
    if (cfg.do_sample_negatives) corpus = sample_negatives(corpus, cfg.split);
    return corpus;
}

namespace detail {

inline void require_file(const std::string& path, const std::string& hint) {
    if (!std::filesystem::exists(path)) fail("missing " + path + " (" + hint + ")");
}

}  // namespace detail

// ----------------------------- commands -----------------------------

inline void cmd_ingest(const RunConfig& cfg) {
    detail::require_file(cfg.paths.interactions, "configure paths.interactions");
    detail::require_file(cfg.paths.items, "configure paths.items");
    detail::require_file(cfg.paths.targets, "configure paths.targets");

    const CorpusPaths out = corpus_paths(cfg);
    const std::vector<std::string> inputs{cfg.paths.interactions, cfg.paths.items,
                                          cfg.paths.targets};
    const std::vector<std::string> outputs{out.old_ids, out.new_ids, out.tasks, out.schedules};
    if (detail::stage_current(cfg, "ingest", inputs, outputs)) {
        std::cout << "ingest: up to date\n";
        return;
    }

    const Corpus corpus = load_corpus(cfg);
    const ItemPartition parts = partition_items(corpus, cfg.split);
    const auto tasks =
        build_tasks(corpus, parts.old_ids, static_cast<std::size_t>(cfg.tasks.n_support),
                    static_cast<std::size_t>(cfg.tasks.n_query), cfg.seed);
    std::vector<PhaseSchedule> schedules;
    for (const auto& id : parts.new_ids)
        schedules.push_back(build_phase_schedule(corpus, id, cfg.split.K));

    write_id_file(out.old_ids, parts.old_ids);
    write_id_file(out.new_ids, parts.new_ids);
    write_tasks(out.tasks, tasks);
    write_schedules(out.schedules, schedules);
    detail::write_stamp(cfg, "ingest", inputs, outputs);

    std::cout << "ingest: items=" << corpus.items().size() << " targets=" << corpus.targets().size()
              << " interactions=" << corpus.interactions().size() << " old=" << parts.old_ids.size()
              << " new=" << parts.new_ids.size() << " excluded=" << parts.excluded_ids.size()
              << " tasks=" << tasks.size() << " schedules=" << schedules.size() << "\n";
}

namespace detail {

inline std::unique_ptr<AugmentationProvider> make_augment_provider(
    const RunConfig& cfg, const std::vector<std::string>& raw_names) {
    if (cfg.augment.provider == "replay") return replay_provider(cfg.paths.augment_cache);
    HttpProviderConfig hc;
    hc.endpoint = cfg.augment.endpoint;
    hc.timeout = std::chrono::milliseconds{cfg.augment.timeout_ms};
    hc.max_retries = cfg.augment.max_retries;
    hc.backoff = std::chrono::milliseconds{cfg.augment.backoff_ms};
    if (!cfg.augment.propose_template_path.empty())
        hc.propose_template = read_text_file(cfg.augment.propose_template_path);
    if (!cfg.augment.fill_template_path.empty())
        hc.fill_template = read_text_file(cfg.augment.fill_template_path);
    auto provider = std::make_unique<HttpAugmentationProvider>(std::move(hc));
    provider->set_raw_features_hint(raw_names);
    return provider;
}

inline std::vector<std::string> items_in_play(const RunConfig& cfg) {
    const CorpusPaths cp = corpus_paths(cfg);
    require_file(cp.old_ids, "run `ingest` first");
    require_file(cp.new_ids, "run `ingest` first");
    std::vector<std::string> ids;
    for (const auto& id : read_id_file(cp.old_ids)) ids.push_back(id);
    for (const auto& id : read_id_file(cp.new_ids)) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace detail

inline void cmd_augment(const RunConfig& cfg) {
    if (cfg.serialize.mode == "raw_only") {
        std::cout << "augment: skipped (serialize.mode=raw_only)\n";
        return;
    }
    const Corpus corpus = load_corpus(cfg);
    if (corpus.items().empty()) fail("augment: corpus has no items");
    std::vector<std::string> raw_names;
    for (const auto& f : corpus.items().front().features) raw_names.push_back(f.name);

    AugmentCache cache{cfg.paths.augment_cache};
    auto provider = detail::make_augment_provider(cfg, raw_names);
    const AugmentationSchema schema =
        propose_schema(*provider, cache, cfg.item_type, raw_names);

    const auto ids = detail::items_in_play(cfg);
    const std::uint64_t h = schema_hash(schema);
    std::size_t hits = 0, filled = 0;
    std::vector<std::string> failures;

    // Misses run through the provider with a bounded number of in-flight
    // calls; results commit to the cache in item order so reruns are
    // byte-stable.
    const int parallelism = std::max(1, cfg.augment.parallelism);
    std::vector<std::string> misses;
    for (const auto& id : ids) {
        if (cache.lookup(id, h))
            ++hits;
        else
            misses.push_back(id);
    }
    std::size_t pos = 0;
    while (pos < misses.size()) {
        const std::size_t end = std::min(misses.size(), pos + static_cast<std::size_t>(parallelism));
        std::vector<std::future<AugmentedFeatureSet>> futures;
        for (std::size_t k = pos; k < end; ++k) {
            const Item& item = corpus.item(misses[k]);
            futures.push_back(std::async(std::launch::async, [&provider, &schema, item] {
                return provider->fill(item, schema);
            }));
        }
        for (std::size_t k = pos; k < end; ++k) {
            const std::string& id = misses[k];
            try {
                const AugmentedFeatureSet raw = futures[k - pos].get();
                // normalize through the standard path (pads partial fills)
                AugmentedFeatureSet out;
                out.item_id = id;
                for (const auto& name : schema.feature_names) {
                    std::string content;
                    for (const auto& f : raw.features)
                        if (lower(trim(f.name)) == lower(name)) {
                            content = f.content;
                            break;
                        }
                    out.features.push_back({name, content});
                }
                cache.put(out, h);
                ++filled;
            } catch (const std::exception& e) {
                log_error("augment: item " + id + ": " + e.what());
                failures.push_back(id);
            }
        }
        pos = end;
    }

    std::cout << "augment: schema=" << schema.feature_names.size() << " features, cache_hits="
              << hits << " filled=" << filled << " failed=" << failures.size() << "\n";
    if (!failures.empty()) {
        std::string msg = "augment: provider failed for " + std::to_string(failures.size()) +
                          " item(s):";
        for (const auto& id : failures) msg += " " + id;
        fail(msg);
    }
}

namespace detail {

inline std::unique_ptr<EncoderProvider> make_encoder_provider(const RunConfig& cfg) {
    if (cfg.encoder.kind == "hash")
        return hashed_encoder(static_cast<std::size_t>(cfg.encoder.dim),
                              stage_seed(cfg, "encoder"));
    if (cfg.encoder.kind == "file") {
        if (cfg.encoder.source.empty()) fail("encoder.kind=file requires encoder.source");
        return file_encoder(cfg.encoder.source);
    }
    return http_encoder(cfg.encoder.endpoint, static_cast<std::size_t>(cfg.encoder.dim),
                        std::chrono::milliseconds{cfg.encoder.timeout_ms});
}

// Serialized text per item under the configured mode, consulting the
// augmentation cache when the mode wants augmented features.
inline std::vector<SerializedText> serialize_corpus_items(const RunConfig& cfg,
                                                          const Corpus& corpus,
                                                          const std::vector<std::string>& ids) {
    const SerializeMode mode = serialize_mode_from_string(cfg.serialize.mode);
    std::unique_ptr<AugmentCache> cache;
    std::optional<AugmentationSchema> schema;
    if (mode != SerializeMode::raw_only && std::filesystem::exists(cfg.paths.augment_cache)) {
        cache = std::make_unique<AugmentCache>(cfg.paths.augment_cache);
        schema = cache->schema_for(cfg.item_type);
    }
    if (mode == SerializeMode::augmented_only && !schema)
        fail("serialize.mode=augmented_only needs an augmentation cache with a schema for `" +
             cfg.item_type + "` (run `augment` first)");

    std::vector<SerializedText> texts;
    for (const auto& id : ids) {
        const Item& item = corpus.item(id);
        std::optional<AugmentedFeatureSet> afs;
        if (schema) {
            afs = cache->lookup(id, schema_hash(*schema));
            if (!afs && mode == SerializeMode::augmented_only)
                fail("augmented_only: no cached augmentation for item " + id);
            if (!afs)
                log_warn("serialize: no cached augmentation for item " + id +
                         "; using raw features only");
        }
        texts.push_back(serialize_item(item, afs ? &*afs : nullptr, mode,
                                       static_cast<std::size_t>(cfg.serialize.max_chars)));
    }
    return texts;
}

}  // namespace detail

inline void cmd_encode(const RunConfig& cfg) {
    const CorpusPaths cp = corpus_paths(cfg);
    std::vector<std::string> inputs{cfg.paths.interactions, cfg.paths.items, cfg.paths.targets,
                                    cp.old_ids, cp.new_ids};
    if (std::filesystem::exists(cfg.paths.augment_cache)) inputs.push_back(cfg.paths.augment_cache);
    const std::string dump_path = cfg.paths.out_dir + "/serialized.jsonl";
    const std::vector<std::string> outputs{cfg.paths.representation_cache, dump_path};
    if (detail::stage_current(cfg, "encode", inputs, outputs)) {
        std::cout << "encode: up to date\n";
        return;
    }

    const Corpus corpus = load_corpus(cfg);
    const auto ids = detail::items_in_play(cfg);
    const auto texts = detail::serialize_corpus_items(cfg, corpus, ids);
    auto provider = detail::make_encoder_provider(cfg);

    RepresentationMemo memo;
    std::vector<TextRepresentation> reps;
    reps.reserve(texts.size());
    for (const auto& s : texts) reps.push_back(encode_item(*provider, s, &memo));

    write_representation_cache(cfg.paths.representation_cache, provider->dim(), reps);
    write_serialized_dump(dump_path, texts);
    detail::write_stamp(cfg, "encode", inputs, outputs);
    std::cout << "encode: items=" << reps.size() << " dim=" << provider->dim() << " provider="
              << provider->id() << "\n";
}

inline void cmd_pretrain(const RunConfig& cfg) {
    const CorpusPaths cp = corpus_paths(cfg);
    detail::require_file(cp.tasks, "run `ingest` first");
    const std::vector<std::string> inputs{cfg.paths.interactions, cfg.paths.items,
                                          cfg.paths.targets, cp.tasks};
    const std::string curve_path = cfg.paths.out_dir + "/pretrain_curve.csv";
    const std::vector<std::string> outputs{cfg.paths.backbone_checkpoint, curve_path};
    if (detail::stage_current(cfg, "pretrain", inputs, outputs)) {
        std::cout << "pretrain: up to date\n";
        return;
    }

    const Corpus corpus = load_corpus(cfg);
    const auto tasks = read_tasks(cp.tasks);
    TrainConfig tc = cfg.backbone;
    tc.seed = stage_seed(cfg, "backbone");
    const PretrainResult result = pretrain(corpus, tasks, tc);

    save_backbone(cfg.paths.backbone_checkpoint, result.model);
    std::string curve = "epoch,loss\n0," + format_sig9(result.initial_loss) + "\n";
    for (std::size_t i = 0; i < result.epoch_loss.size(); ++i)
        curve += std::to_string(i + 1) + "," + format_sig9(result.epoch_loss[i]) + "\n";
    write_text_file(curve_path, curve);
    detail::write_stamp(cfg, "pretrain", inputs, outputs);
    std::cout << "pretrain: epochs=" << result.epoch_loss.size() << " initial_loss="
              << format_sig9(result.initial_loss) << " final_loss="
              << format_sig9(result.epoch_loss.back()) << "\n";
}

inline void cmd_meta_train(const RunConfig& cfg) {
    const CorpusPaths cp = corpus_paths(cfg);
    detail::require_file(cp.tasks, "run `ingest` first");
    detail::require_file(cfg.paths.representation_cache, "run `encode` first");
    detail::require_file(cfg.paths.backbone_checkpoint, "run `pretrain` first");
    const std::vector<std::string> inputs{cfg.paths.interactions, cfg.paths.items,
                                          cfg.paths.targets, cp.tasks,
                                          cfg.paths.representation_cache,
                                          cfg.paths.backbone_checkpoint};
    const std::string log_path = cfg.paths.out_dir + "/meta_log.csv";
    const std::vector<std::string> outputs{cfg.paths.align_checkpoint, log_path};
    if (detail::stage_current(cfg, "meta_train", inputs, outputs)) {
        std::cout << "meta-train: up to date\n";
        return;
    }

    const Corpus corpus = load_corpus(cfg);
    const auto tasks = read_tasks(cp.tasks);
    auto [dim, reps] = load_representation_cache(cfg.paths.representation_cache);
    const Backbone backbone = load_backbone(cfg.paths.backbone_checkpoint);
    MetaConfig mc = cfg.meta;
    mc.seed = stage_seed(cfg, "meta");
    const MetaTrainResult result = meta_train(tasks, reps, backbone, corpus, mc);

    save_align(cfg.paths.align_checkpoint, result.theta);
    write_meta_log(log_path, result.log);
    detail::write_stamp(cfg, "meta_train", inputs, outputs);
    std::cout << "meta-train: epochs=" << result.log.size() << " objective_first="
              << format_sig9(result.log.front().objective) << " objective_last="
              << format_sig9(result.log.back().objective) << "\n";
}

inline void cmd_eval(const RunConfig& cfg) {
    const CorpusPaths cp = corpus_paths(cfg);
    detail::require_file(cp.schedules, "run `ingest` first");
    detail::require_file(cfg.paths.representation_cache, "run `encode` first");
    detail::require_file(cfg.paths.backbone_checkpoint, "run `pretrain` first");
    detail::require_file(cfg.paths.align_checkpoint, "run `meta-train` first");

    const Corpus corpus = load_corpus(cfg);
    const auto schedules = read_schedules(cp.schedules);
    auto [dim, reps] = load_representation_cache(cfg.paths.representation_cache);
    const Backbone backbone = load_backbone(cfg.paths.backbone_checkpoint);
    const AlignParams theta = load_align(cfg.paths.align_checkpoint);
    const ProtocolMode mode = protocol_mode_from_string(cfg.protocol);
    const std::string digest = config_digest(cfg);

    std::vector<MetricReport> reports;
    ScorePools pools;
    for (const auto& sched : schedules) {
        try {
            auto item_reports =
                run_phase_protocol(sched, theta, backbone, reps, corpus, mode, cfg.meta,
                                   cfg.f1_threshold, digest,
                                   cfg.aggregate_mode == "pooled" ? &pools : nullptr);
            reports.insert(reports.end(), item_reports.begin(), item_reports.end());
        } catch (const std::exception& e) {
            log_error("eval: item " + sched.item_id + " failed: " + e.what());
        }
    }
    if (reports.empty()) fail("eval: no reports produced");

    write_metrics(cfg.paths.out_dir + "/metrics.jsonl", reports);
    std::vector<PhaseSummary> summary;
    if (cfg.aggregate_mode == "pooled") {
        for (const auto& [phase, pool] : pools) {
            PhaseSummary s;
            s.phase = phase;
            bool has_pos = false, has_neg = false;
            for (int y : pool.second) (y == 1 ? has_pos : has_neg) = true;
            if (has_pos && has_neg) {
                s.auc_mean = auc(pool.first, pool.second);
                s.f1_mean = f1(pool.first, pool.second, cfg.f1_threshold);
            }
            s.auc_std = 0.0;
            s.f1_std = 0.0;
            s.n_items = static_cast<int>(pool.first.size());  // pooled: pair count
            summary.push_back(s);
        }
    } else {
        summary = aggregate(reports);
    }
    write_summary_csv(cfg.paths.out_dir + "/summary.csv", summary);
    write_summary_json(cfg.paths.out_dir + "/summary.json", summary);

    for (const auto& s : summary)
        std::cout << "eval: phase=" << s.phase << " auc=" << format_sig9(s.auc_mean)
                  << " f1=" << format_sig9(s.f1_mean) << " n=" << s.n_items << "\n";
}

inline void cmd_synth(const RunConfig& cfg) {
    if (cfg.paths.interactions.empty()) fail("synth: configure paths.interactions");
    const std::string dir =
        std::filesystem::path{cfg.paths.interactions}.parent_path().string();
    if (dir.empty()) fail("synth: paths.interactions must live in a directory");
    SyntheticSpec spec = cfg.synth;
    spec.seed = stage_seed(cfg, "synth");
    const SyntheticOutput out = generate_synthetic(spec, cfg.split, dir);
    if (out.items_path != cfg.paths.items || out.targets_path != cfg.paths.targets)
        fail("synth: config paths must be " + out.items_path + " and " + out.targets_path +
             " to match the generated files");
    std::cout << "synth: items=" << spec.n_items << " targets=" << spec.n_targets << " old="
              << spec.n_old << " new=" << spec.n_new << " dir=" << dir << "\n";
}

inline void cmd_report(const RunConfig& cfg) {
    const std::string metrics_path = cfg.paths.out_dir + "/metrics.jsonl";
    detail::require_file(metrics_path, "run `eval` first");
    const auto reports = read_metrics(metrics_path);
    const auto summary = aggregate(reports);
    write_summary_csv(cfg.paths.out_dir + "/summary.csv", summary);
    write_summary_json(cfg.paths.out_dir + "/summary.json", summary);
    for (const auto& s : summary)
        std::cout << "report: phase=" << s.phase << " auc_mean=" << format_sig9(s.auc_mean)
                  << " auc_std=" << format_sig9(s.auc_std) << " f1_mean=" << format_sig9(s.f1_mean)
                  << " f1_std=" << format_sig9(s.f1_std) << " n=" << s.n_items << "\n";
}

}  // namespace emerflow

#endif  // EMERFLOW_PIPELINE_HPP
