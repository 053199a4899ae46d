#ifndef EMERFLOW_CORPUS_HPP
#define EMERFLOW_CORPUS_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "emerflow/common.hpp"

namespace emerflow {

// ----------------------------- domain types -----------------------------

struct FeatureValue {
    std::string name;     // descriptor, e.g. "Release Year"
    std::string content;  // rendered value, may be empty
};

struct Item {
    std::string id;
    std::string item_type;  // e.g. "movie", "disease"
    std::vector<FeatureValue> features;
};

struct TargetEntity {
    std::string id;
    std::vector<FeatureValue> features;
};

struct Interaction {
    std::string item_id;
    std::string target_id;
    int label = 0;  // {0,1}
    std::int64_t timestamp = 0;
};

struct Task {
    std::string item_id;
    std::vector<Interaction> support;
    std::vector<Interaction> query;
};

struct PhaseSchedule {
    std::string item_id;
    std::array<std::vector<Interaction>, 4> sets;
};

struct SplitConfig {
    std::int64_t N = 200;          // old/new record-count threshold
    std::int64_t K = 20;           // per-phase shot count
    double negative_ratio = 1.0;   // negatives per positive when sampling
    std::uint64_t seed = 0;

    void validate() const {
        if (N <= 0 || K <= 0) fail("split config: N and K must be positive");
        if (negative_ratio < 0.0) fail("split config: negative_ratio must be nonnegative");
        if (N < 3 * K) fail("split config: N must be >= 3K (old/new classes overlap otherwise)");
    }
};

// Canonical record order used everywhere a total order is needed:
// timestamp ascending, ties broken by target_id.
inline bool record_before(const Interaction& a, const Interaction& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.target_id < b.target_id;
}

// ----------------------------- corpus -----------------------------

class Corpus {
public:
    Corpus() = default;
    Corpus(std::vector<Item> items, std::vector<TargetEntity> targets,
           std::vector<Interaction> interactions)
        : items_(std::move(items)), targets_(std::move(targets)),
          interactions_(std::move(interactions)) {
        for (std::size_t i = 0; i < items_.size(); ++i) item_index_[items_[i].id] = i;
        for (std::size_t i = 0; i < targets_.size(); ++i) target_index_[targets_[i].id] = i;
        std::sort(interactions_.begin(), interactions_.end(),
                  [](const Interaction& a, const Interaction& b) {
                      if (a.item_id != b.item_id) return a.item_id < b.item_id;
                      return record_before(a, b);
                  });
        for (std::size_t i = 0; i < interactions_.size(); ++i)
            by_item_[interactions_[i].item_id].push_back(i);
    }

    const std::vector<Item>& items() const { return items_; }
    const std::vector<TargetEntity>& targets() const { return targets_; }
    const std::vector<Interaction>& interactions() const { return interactions_; }

    bool has_item(const std::string& id) const { return item_index_.count(id) > 0; }
    bool has_target(const std::string& id) const { return target_index_.count(id) > 0; }

    const Item& item(const std::string& id) const {
        auto it = item_index_.find(id);
        if (it == item_index_.end()) fail("unknown item id: " + id);
        return items_[it->second];
    }

    const TargetEntity& target(const std::string& id) const {
        auto it = target_index_.find(id);
        if (it == target_index_.end()) fail("unknown target id: " + id);
        return targets_[it->second];
    }

    // Records of one item in canonical (timestamp, target_id) order.
    std::vector<Interaction> records(const std::string& item_id) const {
        std::vector<Interaction> out;
        auto it = by_item_.find(item_id);
        if (it == by_item_.end()) return out;
        out.reserve(it->second.size());
        for (std::size_t idx : it->second) out.push_back(interactions_[idx]);
        return out;
    }

    std::size_t record_count(const std::string& item_id) const {
        auto it = by_item_.find(item_id);
        return it == by_item_.end() ? 0 : it->second.size();
    }

private:
    std::vector<Item> items_;
    std::vector<TargetEntity> targets_;
    std::vector<Interaction> interactions_;
    std::map<std::string, std::size_t> item_index_;
    std::map<std::string, std::size_t> target_index_;
    std::map<std::string, std::vector<std::size_t>> by_item_;
};

// ----------------------------- csv ingestion -----------------------------

namespace detail {

inline std::vector<std::string> csv_row(const std::string& line) { return split(line, ','); }

// Feature-table files: header `id,<name 1>,<name 2>,...`; column order is
// the schema order. Returns (feature names, rows).
inline std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>
read_feature_table(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> names;
    std::vector<std::vector<std::string>> rows;
    if (text.empty()) fail(path + ": empty file (expected `id,...` header)");
    std::istringstream in{text};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            auto header = csv_row(line);
            if (header.empty() || header[0] != "id")
                fail(path + ": header must start with `id`");
            names.assign(header.begin() + 1, header.end());
            std::set<std::string> seen;
            for (const auto& n : names) {
                if (trim(n).empty()) fail(path + ": empty feature name in header");
                if (!seen.insert(lower(n)).second)
                    fail(path + ": duplicate feature name `" + n + "`");
            }
            continue;
        }
        if (line.empty()) continue;
        auto row = csv_row(line);
        if (row.size() != names.size() + 1)
            fail(path + ":" + std::to_string(lineno) + ": expected " +
                 std::to_string(names.size() + 1) + " columns, got " + std::to_string(row.size()));
        if (row[0].empty()) fail(path + ":" + std::to_string(lineno) + ": empty id");
        rows.push_back(std::move(row));
    }
    return {names, rows};
}

inline std::int64_t parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) fail("");
        return v;
    } catch (...) {
        fail(where + ": not an integer: `" + s + "`");
    }
}

inline double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) fail("");
        return v;
    } catch (...) {
        fail(where + ": not a number: `" + s + "`");
    }
}

}  // namespace detail

// Reads the three CSV files and builds an immutable corpus.
//
// Duplicate (item, target) pairs collapse to the earliest timestamp. With a
// binarize threshold, raw scores map to 1 when score >= threshold, else 0;
// without one the label column must already be binary.
inline Corpus ingest(const std::string& interactions_path, const std::string& items_path,
                     const std::string& targets_path,
                     std::optional<double> binarize_threshold = std::nullopt,
                     const std::string& item_type = "item") {
    auto [item_names, item_rows] = detail::read_feature_table(items_path);
    auto [target_names, target_rows] = detail::read_feature_table(targets_path);

    std::vector<Item> items;
    items.reserve(item_rows.size());
    for (auto& row : item_rows) {
        Item it;
        it.id = row[0];
        it.item_type = item_type;
        for (std::size_t c = 0; c < item_names.size(); ++c)
            it.features.push_back({item_names[c], row[c + 1]});
        items.push_back(std::move(it));
    }
    std::vector<TargetEntity> targets;
    targets.reserve(target_rows.size());
    for (auto& row : target_rows) {
        TargetEntity t;
        t.id = row[0];
        for (std::size_t c = 0; c < target_names.size(); ++c)
            t.features.push_back({target_names[c], row[c + 1]});
        targets.push_back(std::move(t));
    }

    std::set<std::string> item_ids, target_ids;
    for (const auto& it : items) {
        if (!item_ids.insert(it.id).second) fail(items_path + ": duplicate item id `" + it.id + "`");
    }
    for (const auto& t : targets) {
        if (!target_ids.insert(t.id).second) fail(targets_path + ": duplicate target id `" + t.id + "`");
    }

    const std::string text = read_text_file(interactions_path);
    std::vector<Interaction> interactions;
    std::set<std::string> dangling_items, dangling_targets;
    if (!text.empty()) {
        std::istringstream in{text};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (lineno == 1) {
                if (line != "item_id,target_id,label_or_score,timestamp")
                    fail(interactions_path + ": bad header `" + line + "`");
                continue;
            }
            if (line.empty()) continue;
            const std::string where = interactions_path + ":" + std::to_string(lineno);
            auto row = detail::csv_row(line);
            if (row.size() != 4) fail(where + ": expected 4 columns, got " + std::to_string(row.size()));
            Interaction rec;
            rec.item_id = row[0];
            rec.target_id = row[1];
            const double score = detail::parse_double(row[2], where);
            if (binarize_threshold.has_value()) {
                rec.label = score >= *binarize_threshold ? 1 : 0;
            } else {
                if (score != 0.0 && score != 1.0)
                    fail(where + ": non-binary label `" + row[2] + "` (no binarize threshold configured)");
                rec.label = score == 1.0 ? 1 : 0;
            }
            rec.timestamp = detail::parse_int(row[3], where);
            if (!item_ids.count(rec.item_id)) dangling_items.insert(rec.item_id);
            if (!target_ids.count(rec.target_id)) dangling_targets.insert(rec.target_id);
            interactions.push_back(std::move(rec));
        }
    }

    if (!dangling_items.empty() || !dangling_targets.empty()) {
        std::string msg = interactions_path + ": references unknown ids;";
        if (!dangling_items.empty()) {
            msg += " items:";
            for (const auto& id : dangling_items) msg += " " + id;
        }
        if (!dangling_targets.empty()) {
            msg += " targets:";
            for (const auto& id : dangling_targets) msg += " " + id;
        }
        fail(msg);
    }

    // Deduplicate (item, target): keep the earliest timestamp, first
    // occurrence winning ties.
    std::map<std::pair<std::string, std::string>, std::size_t> first;
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto key = std::make_pair(interactions[i].item_id, interactions[i].target_id);
        auto it = first.find(key);
        if (it == first.end()) {
            first[key] = i;
        } else if (interactions[i].timestamp < interactions[it->second].timestamp) {
            it->second = i;
        }
    }
    std::vector<Interaction> unique;
    unique.reserve(first.size());
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto key = std::make_pair(interactions[i].item_id, interactions[i].target_id);
        if (first.at(key) == i) unique.push_back(interactions[i]);
    }

    return Corpus{std::move(items), std::move(targets), std::move(unique)};
}

// ----------------------------- negative sampling -----------------------------

// Adds floor(negative_ratio * positives) label-0 records per item, drawn
// uniformly without replacement from targets the item was never observed
// with. Each synthetic negative inherits the timestamp of a paired positive
// so phase splits stay balanced.
inline Corpus sample_negatives(const Corpus& corpus, const SplitConfig& config) {
    config.validate();
    for (const auto& rec : corpus.interactions())
        if (rec.label != 1)
            fail("sample_negatives: corpus must contain only positive interactions "
                 "(found label 0 for item " + rec.item_id + ")");

    std::vector<Interaction> combined = corpus.interactions();
    for (const auto& item : corpus.items()) {
        const auto positives = corpus.records(item.id);
        if (positives.empty()) continue;
        const auto n_neg =
            static_cast<std::size_t>(config.negative_ratio * static_cast<double>(positives.size()));
        if (n_neg == 0) continue;

        std::set<std::string> observed;
        for (const auto& rec : positives) observed.insert(rec.target_id);
        std::vector<std::string> unobserved;
        unobserved.reserve(corpus.targets().size());
        for (const auto& t : corpus.targets())
            if (!observed.count(t.id)) unobserved.push_back(t.id);
        std::sort(unobserved.begin(), unobserved.end());

        if (n_neg > unobserved.size())
            fail("sample_negatives: item " + item.id + " needs " + std::to_string(n_neg) +
                 " negatives but only " + std::to_string(unobserved.size()) +
                 " unobserved targets exist");

        Rng rng{subseed(config.seed, "negatives:" + item.id)};
        const auto picks = rng.sample_indices(unobserved.size(), n_neg);
        for (std::size_t k = 0; k < picks.size(); ++k) {
            Interaction neg;
            neg.item_id = item.id;
            neg.target_id = unobserved[picks[k]];
            neg.label = 0;
            neg.timestamp = positives[k % positives.size()].timestamp;
            combined.push_back(std::move(neg));
        }
    }
    return Corpus{corpus.items(), corpus.targets(), std::move(combined)};
}

// ----------------------------- partitioning -----------------------------

struct ItemPartition {
    std::set<std::string> old_ids;       // record count > N
    std::set<std::string> new_ids;       // 3K <= count <= N
    std::set<std::string> excluded_ids;  // count < 3K
};

inline ItemPartition partition_items(const Corpus& corpus, const SplitConfig& config) {
    config.validate();
    ItemPartition out;
    for (const auto& item : corpus.items()) {
        const auto count = static_cast<std::int64_t>(corpus.record_count(item.id));
        if (count > config.N)
            out.old_ids.insert(item.id);
        else if (count >= 3 * config.K)
            out.new_ids.insert(item.id);
        else
            out.excluded_ids.insert(item.id);
    }
    return out;
}

// ----------------------------- task construction -----------------------------

// One task per old item: the earliest n_support records form the support
// set, the query set is a seeded uniform sample of n_query from the rest.
inline std::vector<Task> build_tasks(const Corpus& corpus, const std::set<std::string>& old_ids,
                                     std::size_t n_support, std::size_t n_query,
                                     std::uint64_t seed) {
    if (n_support == 0) fail("build_tasks: support may not be empty");
    if (n_query == 0) fail("build_tasks: query may not be empty");
    std::vector<Task> tasks;
    for (const auto& id : old_ids) {
        auto records = corpus.records(id);
        if (records.size() < n_support + n_query) {
            log_warn("build_tasks: item " + id + " has " + std::to_string(records.size()) +
                     " records, needs " + std::to_string(n_support + n_query) + "; skipped");
            continue;
        }
        Task task;
        task.item_id = id;
        task.support.assign(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(n_support));
        const std::size_t rest = records.size() - n_support;
        Rng rng{subseed(seed, "tasks:" + id)};
        auto picks = rng.sample_indices(rest, n_query);
        std::sort(picks.begin(), picks.end());
        for (std::size_t p : picks) task.query.push_back(records[n_support + p]);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

// ----------------------------- phase schedules -----------------------------

inline PhaseSchedule build_phase_schedule(const Corpus& corpus, const std::string& new_id,
                                          std::int64_t K) {
    if (K <= 0) fail("build_phase_schedule: K must be positive");
    auto records = corpus.records(new_id);
    const auto k = static_cast<std::size_t>(K);
    if (records.size() < 3 * k)
        fail("build_phase_schedule: item " + new_id + " has " + std::to_string(records.size()) +
             " records, needs at least " + std::to_string(3 * k));
    PhaseSchedule sched;
    sched.item_id = new_id;
    for (std::size_t p = 0; p < 3; ++p)
        sched.sets[p].assign(records.begin() + static_cast<std::ptrdiff_t>(p * k),
                             records.begin() + static_cast<std::ptrdiff_t>((p + 1) * k));
    sched.sets[3].assign(records.begin() + static_cast<std::ptrdiff_t>(3 * k), records.end());
    return sched;
}

// ----------------------------- corpus dir artifacts -----------------------------

namespace detail {

inline nlohmann::ordered_json record_json(const Interaction& rec) {
    return nlohmann::ordered_json{
        {"target_id", rec.target_id}, {"label", rec.label}, {"timestamp", rec.timestamp}};
}

inline Interaction record_from_json(const std::string& item_id, const nlohmann::json& j) {
    Interaction rec;
    rec.item_id = item_id;
    rec.target_id = j.at("target_id").get<std::string>();
    rec.label = j.at("label").get<int>();
    rec.timestamp = j.at("timestamp").get<std::int64_t>();
    return rec;
}

}  // namespace detail

inline void write_id_file(const std::string& path, const std::set<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        out += id;
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::set<std::string> read_id_file(const std::string& path) {
    std::set<std::string> ids;
    std::istringstream in{read_text_file(path)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) ids.insert(line);
    }
    return ids;
}

inline void write_tasks(const std::string& path, const std::vector<Task>& tasks) {
    std::string out;
    for (const auto& task : tasks) {
        nlohmann::ordered_json j;
        j["item_id"] = task.item_id;
        j["support"] = nlohmann::ordered_json::array();
        for (const auto& rec : task.support) j["support"].push_back(detail::record_json(rec));
        j["query"] = nlohmann::ordered_json::array();
        for (const auto& rec : task.query) j["query"].push_back(detail::record_json(rec));
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::vector<Task> read_tasks(const std::string& path) {
    std::vector<Task> tasks;
    std::istringstream in{read_text_file(path)};
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Task task;
        task.item_id = j.at("item_id").get<std::string>();
        for (const auto& r : j.at("support")) task.support.push_back(detail::record_from_json(task.item_id, r));
        for (const auto& r : j.at("query")) task.query.push_back(detail::record_from_json(task.item_id, r));
        tasks.push_back(std::move(task));
    }
    return tasks;
}

inline void write_schedules(const std::string& path, const std::vector<PhaseSchedule>& schedules) {
    std::string out;
    for (const auto& sched : schedules) {
        nlohmann::ordered_json j;
        j["item_id"] = sched.item_id;
        j["sets"] = nlohmann::ordered_json::array();
        for (const auto& set : sched.sets) {
            nlohmann::ordered_json arr = nlohmann::ordered_json::array();
            for (const auto& rec : set) arr.push_back(detail::record_json(rec));
            j["sets"].push_back(arr);
        }
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::vector<PhaseSchedule> read_schedules(const std::string& path) {
    std::vector<PhaseSchedule> schedules;
    std::istringstream in{read_text_file(path)};
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        PhaseSchedule sched;
        sched.item_id = j.at("item_id").get<std::string>();
        const auto& sets = j.at("sets");
        if (sets.size() != 4) fail(path + ": schedule for " + sched.item_id + " must have 4 sets");
        for (std::size_t p = 0; p < 4; ++p)
            for (const auto& r : sets[p])
                sched.sets[p].push_back(detail::record_from_json(sched.item_id, r));
        schedules.push_back(std::move(sched));
    }
    return schedules;
}

}  // namespace emerflow

#endif  // EMERFLOW_CORPUS_HPP
