#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "emerflow/emerflow.hpp"

namespace {

struct CliOverrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<std::string> protocol;
    std::optional<double> alpha;
    std::optional<std::string> encoder;
    std::optional<std::string> provider;
    bool force = false;
};

emerflow::RunConfig effective_config(const CliOverrides& opts) {
    emerflow::RunConfig cfg = emerflow::load_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.mode) cfg.serialize.mode = *opts.mode;
    if (opts.protocol) cfg.protocol = *opts.protocol;
    if (opts.alpha) cfg.meta.alpha = *opts.alpha;
    if (opts.encoder) cfg.encoder.kind = *opts.encoder;
    if (opts.provider) cfg.augment.provider = *opts.provider;
    cfg.force = opts.force;
    // re-validate after overrides
    emerflow::serialize_mode_from_string(cfg.serialize.mode);
    emerflow::protocol_mode_from_string(cfg.protocol);
    if (cfg.encoder.kind != "hash" && cfg.encoder.kind != "file" && cfg.encoder.kind != "http")
        emerflow::fail("encoder must be hash|file|http");
    if (cfg.augment.provider != "replay" && cfg.augment.provider != "http")
        emerflow::fail("provider must be replay|http");
    cfg.meta.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"emerflow: emerging-item recommendation pipeline"};
    app.fallthrough();
    app.require_subcommand(1);

    CliOverrides opts;
    app.add_option("--config", opts.config_path, "JSON run configuration")->required();
    app.add_option("--seed", opts.seed, "override the global seed");
    app.add_option("--mode", opts.mode, "serialize mode: full|raw_only|augmented_only");
    app.add_option("--protocol", opts.protocol, "evaluation protocol: rolling|holdout");
    app.add_option("--alpha", opts.alpha, "override the query-term weight");
    app.add_option("--encoder", opts.encoder, "encoder provider: hash|file|http");
    app.add_option("--provider", opts.provider, "augmentation provider: replay|http");
    app.add_flag("--force", opts.force, "recompute stages even when stamps are current");

    auto* c_ingest = app.add_subcommand("ingest", "build corpus artifacts from the CSV inputs");
    auto* c_augment = app.add_subcommand("augment", "fill the augmentation cache for all items");
    auto* c_encode = app.add_subcommand("encode", "serialize items and write representations");
    auto* c_pretrain = app.add_subcommand("pretrain", "train the backbone on old items");
    auto* c_meta = app.add_subcommand("meta-train", "train the alignment network");
    auto* c_eval = app.add_subcommand("eval", "run the phased protocol over new items");
    auto* c_synth = app.add_subcommand("synth", "generate a synthetic planted-model dataset");
    auto* c_report = app.add_subcommand("report", "re-aggregate metrics.jsonl into summaries");

    CLI11_PARSE(app, argc, argv);

    try {
        const emerflow::RunConfig cfg = effective_config(opts);
        emerflow::DirLock lock{cfg.paths.out_dir};
        if (c_synth->parsed()) emerflow::cmd_synth(cfg);
        if (c_ingest->parsed()) emerflow::cmd_ingest(cfg);
        if (c_augment->parsed()) emerflow::cmd_augment(cfg);
        if (c_encode->parsed()) emerflow::cmd_encode(cfg);
        if (c_pretrain->parsed()) emerflow::cmd_pretrain(cfg);
        if (c_meta->parsed()) emerflow::cmd_meta_train(cfg);
        if (c_eval->parsed()) emerflow::cmd_eval(cfg);
        if (c_report->parsed()) emerflow::cmd_report(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
