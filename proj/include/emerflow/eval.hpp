#ifndef EMERFLOW_EVAL_HPP
#define EMERFLOW_EVAL_HPP

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "emerflow/augment.hpp"
#include "emerflow/backbone.hpp"
#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"
#include "emerflow/meta.hpp"

namespace emerflow {

// ----------------------------- metrics -----------------------------

// Mann-Whitney AUC with average ranks for ties. The numerator is kept in
// integers (doubled rank sums) so the result is exactly the pair-counting
// statistic, not an approximation of it.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) fail("auc: scores and labels differ in length");
    if (scores.empty()) fail("auc: empty input");
    std::int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        if (y == 1)
            ++n_pos;
        else if (y == 0)
            ++n_neg;
        else
            fail("auc: labels must be binary");
    }
    if (n_pos == 0 || n_neg == 0) fail("auc: needs at least one positive and one negative");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::int64_t rank_sum2 = 0;  // 2 * sum of average ranks of positives
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        // tie group occupies 1-based ranks i+1 .. j; average rank doubled = i+1+j
        std::int64_t pos_in_group = 0;
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) ++pos_in_group;
        rank_sum2 += pos_in_group * static_cast<std::int64_t>(i + 1 + j);
        i = j;
    }
    const std::int64_t numerator2 = rank_sum2 - n_pos * (n_pos + 1);
    return static_cast<double>(numerator2) / static_cast<double>(2 * n_pos * n_neg);
}

inline double f1(const std::vector<double>& scores, const std::vector<int>& labels,
                 double threshold) {
    if (scores.size() != labels.size()) fail("f1: scores and labels differ in length");
    if (scores.empty()) fail("f1: empty input");
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (pred && labels[i] == 1) ++tp;
        if (pred && labels[i] == 0) ++fp;
        if (!pred && labels[i] == 1) ++fn;
    }
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// ----------------------------- phase protocol -----------------------------

struct MetricReport {
    std::string item_id;
    int phase = 0;
    std::optional<double> auc_value;  // absent when the test set is single-class
    std::optional<double> f1_value;
    int n_test = 0;
    std::string config_digest;
};

enum class ProtocolMode { rolling, holdout };

inline ProtocolMode protocol_mode_from_string(const std::string& s) {
    if (s == "rolling") return ProtocolMode::rolling;
    if (s == "holdout") return ProtocolMode::holdout;
    fail("unknown protocol `" + s + "` (expected rolling|holdout)");
}

inline std::string to_string(ProtocolMode mode) {
    return mode == ProtocolMode::rolling ? "rolling" : "holdout";
}

// Per-phase pools of (score, label) pairs across items, for the pooled
// aggregation mode.
using ScorePools = std::map<int, std::pair<std::vector<double>, std::vector<int>>>;

// Rolling: phase p tests set p with the current embedding, which is then
// adapted on that same set before the next phase. Holdout: the final set is
// re-tested after each adaptation stage. Embeddings evolve exactly as in
// adapt_across_phases.
inline std::vector<MetricReport> run_phase_protocol(
    const PhaseSchedule& schedule, const AlignParams& theta, const Backbone& backbone,
    const RepresentationMap& reps, const Corpus& corpus, ProtocolMode mode,
    const MetaConfig& config, double f1_threshold, const std::string& config_digest,
    ScorePools* pools = nullptr) {
    const auto snapshots = adapt_across_phases(schedule, theta, backbone, reps, corpus, config);
    std::vector<MetricReport> reports;
    for (int phase = 0; phase < 4; ++phase) {
        const std::vector<Interaction>& test_set =
            mode == ProtocolMode::rolling ? schedule.sets[static_cast<std::size_t>(phase)]
                                          : schedule.sets[3];
        if (test_set.empty()) {
            log_warn("phase protocol: item " + schedule.item_id + " phase " +
                     std::to_string(phase) + " has an empty test set; skipped");
            continue;
        }
        std::vector<double> scores;
        std::vector<int> labels;
        scores.reserve(test_set.size());
        for (const auto& rec : test_set) {
            scores.push_back(
                forward(backbone, snapshots[static_cast<std::size_t>(phase)].current, corpus, rec)
                    .probability);
            labels.push_back(rec.label);
        }
        if (pools != nullptr) {
            auto& pool = (*pools)[phase];
            pool.first.insert(pool.first.end(), scores.begin(), scores.end());
            pool.second.insert(pool.second.end(), labels.begin(), labels.end());
        }
        MetricReport report;
        report.item_id = schedule.item_id;
        report.phase = phase;
        report.n_test = static_cast<int>(test_set.size());
        report.config_digest = config_digest;
        const bool single_class =
            std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; });
        if (single_class) {
            log_warn("phase protocol: item " + schedule.item_id + " phase " +
                     std::to_string(phase) + " test set is single-class; metrics n/a");
        } else {
            report.auc_value = auc(scores, labels);
            report.f1_value = f1(scores, labels, f1_threshold);
        }
        reports.push_back(std::move(report));
    }
    return reports;
}

// ----------------------------- metrics files -----------------------------

inline std::string metric_report_line(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["item_id"] = r.item_id;
    j["phase"] = r.phase;
    if (r.auc_value)
        j["auc"] = *r.auc_value;
    else
        j["auc"] = nullptr;
    if (r.f1_value)
        j["f1"] = *r.f1_value;
    else
        j["f1"] = nullptr;
    j["n_test"] = r.n_test;
    j["config_digest"] = r.config_digest;
    return j.dump();
}

inline void write_metrics(const std::string& path, const std::vector<MetricReport>& reports) {
    std::string out;
    for (const auto& r : reports) {
        out += metric_report_line(r);
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::vector<MetricReport> read_metrics(const std::string& path) {
    std::vector<MetricReport> reports;
    std::istringstream in{read_text_file(path)};
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        MetricReport r;
        r.item_id = j.at("item_id").get<std::string>();
        r.phase = j.at("phase").get<int>();
        if (!j.at("auc").is_null()) r.auc_value = j.at("auc").get<double>();
        if (!j.at("f1").is_null()) r.f1_value = j.at("f1").get<double>();
        r.n_test = j.at("n_test").get<int>();
        r.config_digest = j.at("config_digest").get<std::string>();
        reports.push_back(std::move(r));
    }
    return reports;
}

// ----------------------------- aggregation -----------------------------

struct PhaseSummary {
    int phase = 0;
    double auc_mean = 0.0, auc_std = 0.0;
    double f1_mean = 0.0, f1_std = 0.0;
    int n_items = 0;  // reports contributing metric values
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());  // population std
    return {mean, std::sqrt(var)};
}

}  // namespace detail

inline std::vector<PhaseSummary> aggregate(const std::vector<MetricReport>& reports) {
    if (reports.empty()) fail("aggregate: no reports");
    std::map<int, std::vector<double>> auc_by_phase, f1_by_phase;
    for (const auto& r : reports) {
        if (r.auc_value) auc_by_phase[r.phase].push_back(*r.auc_value);
        if (r.f1_value) f1_by_phase[r.phase].push_back(*r.f1_value);
    }
    std::set<int> phases;
    for (const auto& r : reports) phases.insert(r.phase);
    std::vector<PhaseSummary> out;
    for (int phase : phases) {
        PhaseSummary s;
        s.phase = phase;
        const auto& aucs = auc_by_phase[phase];
        const auto& f1s = f1_by_phase[phase];
        std::tie(s.auc_mean, s.auc_std) = detail::mean_std(aucs);
        std::tie(s.f1_mean, s.f1_std) = detail::mean_std(f1s);
        s.n_items = static_cast<int>(aucs.size());
        out.push_back(s);
    }
    return out;
}

inline void write_summary_csv(const std::string& path, const std::vector<PhaseSummary>& summary) {
    std::string out = "phase,auc_mean,auc_std,f1_mean,f1_std,n_items\n";
    for (const auto& s : summary) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%d\n", s.phase, s.auc_mean,
                      s.auc_std, s.f1_mean, s.f1_std, s.n_items);
        out += buf;
    }
    write_text_file(path, out);
}

inline void write_summary_json(const std::string& path, const std::vector<PhaseSummary>& summary) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& s : summary) {
        arr.push_back(nlohmann::ordered_json{{"phase", s.phase},
                                             {"auc_mean", s.auc_mean},
                                             {"auc_std", s.auc_std},
                                             {"f1_mean", s.f1_mean},
                                             {"f1_std", s.f1_std},
                                             {"n_items", s.n_items}});
    }
    write_text_file(path, arr.dump(2) + "\n");
}

// ----------------------------- synthetic generator -----------------------------

struct SyntheticSpec {
    int n_items = 250;
    int n_targets = 300;
    int n_old = 200;
    int n_new = 40;
    int latent_dim = 8;
    double noise = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_items <= 0 || n_targets <= 0 || n_old <= 0 || n_new <= 0 || latent_dim <= 0)
            fail("synthetic spec: counts must be positive");
        if (n_old + n_new > n_items) fail("synthetic spec: n_old + n_new exceeds n_items");
        if (noise < 0.0 || noise > 1.0) fail("synthetic spec: noise must be in [0,1]");
    }
};

// Planted preference model. The raw affinity is <z_v, z_u>/sqrt(d); the
// label probability applies a sharpness gain so the noiseless Bayes scorer
// separates well (the plain logistic link would cap oracle AUC near 0.75).
struct PlantedModel {
    int latent_dim = 0;
    double noise = 0.0;
    std::map<std::string, std::vector<double>> item_z;
    std::map<std::string, std::vector<double>> target_z;

    static constexpr double kLinkGain = 4.0;

    double affinity(const std::string& item_id, const std::string& target_id) const {
        const auto& zv = item_z.at(item_id);
        const auto& zu = target_z.at(target_id);
        double s = 0.0;
        for (int i = 0; i < latent_dim; ++i) s += zv[i] * zu[i];
        return s / std::sqrt(static_cast<double>(latent_dim));
    }

    double label_probability(const std::string& item_id, const std::string& target_id) const {
        return sigmoid(kLinkGain * affinity(item_id, target_id));
    }
};

namespace detail {

// Unary bin rendering: the sign token of an axis repeated |bin| times.
// Fine-grained magnitudes survive mean pooling in the hashed encoder while
// each distinct content string is still a single categorical value.
inline std::string render_axis(int axis, double z) {
    const int bin = std::clamp(static_cast<int>(std::lround(z / 0.5)), -4, 4);
    const std::string ax = "a" + std::to_string(axis);
    if (bin == 0) return ax + "z";
    const std::string tok = ax + (bin > 0 ? "p" : "m");
    std::string out;
    for (int i = 0; i < std::abs(bin); ++i) {
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

}  // namespace detail

struct SyntheticOutput {
    PlantedModel model;
    std::string interactions_path, items_path, targets_path, truth_path, augment_cache_path;
};

inline SyntheticOutput generate_synthetic(const SyntheticSpec& spec, const SplitConfig& split,
                                          const std::string& out_dir) {
    spec.validate();
    split.validate();
    std::filesystem::create_directories(out_dir);

    PlantedModel model;
    model.latent_dim = spec.latent_dim;
    model.noise = spec.noise;

    auto id_of = [](const char* prefix, int i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
        return std::string{buf};
    };

    std::vector<std::string> item_ids, target_ids;
    for (int i = 0; i < spec.n_items; ++i) {
        const std::string id = id_of("it", i);
        item_ids.push_back(id);
        Rng rng{subseed(spec.seed, "synth:item_z:" + id)};
        std::vector<double> z(spec.latent_dim);
        for (double& v : z) v = rng.normal();
        model.item_z[id] = std::move(z);
    }
    for (int i = 0; i < spec.n_targets; ++i) {
        const std::string id = id_of("tg", i);
        target_ids.push_back(id);
        Rng rng{subseed(spec.seed, "synth:target_z:" + id)};
        std::vector<double> z(spec.latent_dim);
        for (double& v : z) v = rng.normal();
        model.target_z[id] = std::move(z);
    }

    // items.csv: one unary-rendered column per latent axis
    std::string items_csv = "id";
    for (int a = 0; a < spec.latent_dim; ++a) items_csv += ",Axis" + std::to_string(a);
    items_csv += '\n';
    for (const auto& id : item_ids) {
        items_csv += id;
        const auto& z = model.item_z[id];
        for (int a = 0; a < spec.latent_dim; ++a) {
            items_csv += ',';
            items_csv += detail::render_axis(a, z[a]);
        }
        items_csv += '\n';
    }

    // targets.csv: a coarse group column from the first two latent signs
    std::string targets_csv = "id,Group\n";
    for (const auto& id : target_ids) {
        const auto& z = model.target_z[id];
        const int group = (z[0] >= 0.0 ? 1 : 0) + (z[1] >= 0.0 ? 2 : 0);
        targets_csv += id + ",g" + std::to_string(group) + '\n';
    }

    // interactions.csv: old items get > N records, new items land within
    // [3K, N], the remainder stays below 3K and is excluded at partition.
    const std::int64_t N = split.N, K = split.K;
    std::string inter_csv = "item_id,target_id,label_or_score,timestamp\n";
    for (int i = 0; i < spec.n_items; ++i) {
        const std::string& id = item_ids[static_cast<std::size_t>(i)];
        Rng rng{subseed(spec.seed, "synth:records:" + id)};
        std::int64_t count;
        if (i < spec.n_old) {
            count = N + 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * K)));
        } else if (i < spec.n_old + spec.n_new) {
            const std::int64_t hi = std::min(N, 4 * K);
            count = 3 * K + static_cast<std::int64_t>(
                                rng.below(static_cast<std::uint64_t>(hi - 3 * K + 1)));
        } else {
            count = 1 + static_cast<std::int64_t>(
                            rng.below(static_cast<std::uint64_t>(std::min<std::int64_t>(5, 3 * K - 1))));
        }
        if (count > spec.n_targets)
            fail("generate_synthetic: item " + id + " needs " + std::to_string(count) +
                 " distinct targets but only " + std::to_string(spec.n_targets) + " exist");
        const auto picks = rng.sample_indices(static_cast<std::size_t>(spec.n_targets),
                                              static_cast<std::size_t>(count));
        for (std::size_t j = 0; j < picks.size(); ++j) {
            const std::string& tid = target_ids[picks[j]];
            const double p = model.label_probability(id, tid);
            int label = rng.uniform() < p ? 1 : 0;
            if (rng.uniform() < spec.noise) label = 1 - label;
            inter_csv += id + "," + tid + "," + std::to_string(label) + "," +
                         std::to_string(1000 + j) + '\n';
        }
    }

    // Replay-able augmentation cache: one extra feature naming the two
    // strongest axes, so the augment stage has real content to serve.
    AugmentationSchema schema;
    schema.item_type = "synthetic";
    schema.feature_names = {"Profile Summary"};
    const std::uint64_t sh = schema_hash(schema);
    nlohmann::ordered_json schema_line;
    schema_line["item_type"] = schema.item_type;
    schema_line["feature_names"] = schema.feature_names;
    std::string cache_jsonl = schema_line.dump() + "\n";
    for (const auto& id : item_ids) {
        const auto& z = model.item_z[id];
        std::vector<int> axes(static_cast<std::size_t>(spec.latent_dim));
        std::iota(axes.begin(), axes.end(), 0);
        std::sort(axes.begin(), axes.end(), [&](int a, int b) {
            if (std::abs(z[a]) != std::abs(z[b])) return std::abs(z[a]) > std::abs(z[b]);
            return a < b;
        });
        std::string content = "leading";
        for (int k = 0; k < 2 && k < spec.latent_dim; ++k) {
            content += " a" + std::to_string(axes[static_cast<std::size_t>(k)]) +
                       (z[axes[static_cast<std::size_t>(k)]] >= 0.0 ? "p" : "m");
        }
        nlohmann::ordered_json line;
        line["key"] = nlohmann::ordered_json{{"item_id", id}, {"schema_hash", hex64(sh)}};
        line["features"] = nlohmann::ordered_json::array();
        line["features"].push_back(
            nlohmann::ordered_json{{"name", "Profile Summary"}, {"content", content}});
        cache_jsonl += line.dump() + "\n";
    }

    // truth.json: the planted model, for oracle scoring
    nlohmann::ordered_json truth;
    truth["latent_dim"] = spec.latent_dim;
    truth["noise"] = spec.noise;
    truth["seed"] = spec.seed;
    truth["link_gain"] = PlantedModel::kLinkGain;
    truth["items"] = nlohmann::ordered_json::object();
    for (const auto& id : item_ids) truth["items"][id] = model.item_z[id];
    truth["targets"] = nlohmann::ordered_json::object();
    for (const auto& id : target_ids) truth["targets"][id] = model.target_z[id];

    SyntheticOutput out;
    out.model = std::move(model);
    out.interactions_path = out_dir + "/interactions.csv";
    out.items_path = out_dir + "/items.csv";
    out.targets_path = out_dir + "/targets.csv";
    out.truth_path = out_dir + "/truth.json";
    out.augment_cache_path = out_dir + "/augment_cache.jsonl";
    write_text_file(out.interactions_path, inter_csv);
    write_text_file(out.items_path, items_csv);
    write_text_file(out.targets_path, targets_csv);
    write_text_file(out.truth_path, truth.dump(2) + "\n");
    write_text_file(out.augment_cache_path, cache_jsonl);
    return out;
}

inline PlantedModel load_planted_model(const std::string& truth_path) {
    const auto j = nlohmann::json::parse(read_text_file(truth_path));
    PlantedModel model;
    model.latent_dim = j.at("latent_dim").get<int>();
    model.noise = j.at("noise").get<double>();
    for (const auto& [id, z] : j.at("items").items())
        model.item_z[id] = z.get<std::vector<double>>();
    for (const auto& [id, z] : j.at("targets").items())
        model.target_z[id] = z.get<std::vector<double>>();
    return model;
}

}  // namespace emerflow

#endif  // EMERFLOW_EVAL_HPP
