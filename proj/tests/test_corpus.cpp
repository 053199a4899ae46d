#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "emerflow/corpus.hpp"

using namespace emerflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("emerflow_test_" + std::to_string(Catch::rngSeed()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name, const std::string& content) const {
        const std::string p = (path / name).string();
        write_text_file(p, content);
        return p;
    }
};

// Small fixture: 2 items, 3 targets, binary labels.
struct Fixture {
    TempDir dir;
    std::string interactions, items, targets;
    Fixture(const std::string& inter_body =
                "m1,u1,1,100\n"
                "m1,u2,0,200\n"
                "m2,u1,1,150\n") {
        interactions = dir.file("interactions.csv",
                                "item_id,target_id,label_or_score,timestamp\n" + inter_body);
        items = dir.file("items.csv",
                         "id,Title,Genres\n"
                         "m1,Top Gun,Action\n"
                         "m2,Splash,Comedy\n");
        targets = dir.file("targets.csv",
                           "id,Gender\n"
                           "u1,F\n"
                           "u2,M\n"
                           "u3,F\n");
    }
};

Corpus make_corpus(int n_items, int n_targets, const std::vector<Interaction>& recs) {
    std::vector<Item> items;
    for (int i = 0; i < n_items; ++i)
        items.push_back({"it" + std::to_string(i), "thing", {{"F", "v" + std::to_string(i % 3)}}});
    std::vector<TargetEntity> targets;
    for (int i = 0; i < n_targets; ++i) targets.push_back({"tg" + std::to_string(i), {}});
    return Corpus{std::move(items), std::move(targets), recs};
}

}  // namespace

TEST_CASE("ingest binarizes scores against the threshold") {
    Fixture fx{
        "m1,u1,4,100\n"
        "m1,u2,3,200\n"
        "m2,u3,5,50\n"};
    const Corpus c = ingest(fx.interactions, fx.items, fx.targets, 4.0, "movie");
    const auto m1 = c.records("m1");
    REQUIRE(m1.size() == 2);
    CHECK(m1[0].label == 1);  // rating 4 -> positive
    CHECK(m1[1].label == 0);  // rating 3 -> negative
    CHECK(c.records("m2")[0].label == 1);
    CHECK(c.item("m1").item_type == "movie");
}

TEST_CASE("ingest takes binary labels verbatim without a threshold") {
    Fixture fx;
    const Corpus c = ingest(fx.interactions, fx.items, fx.targets);
    CHECK(c.interactions().size() == 3);
    CHECK(c.records("m1")[0].label == 1);
    CHECK(c.records("m1")[1].label == 0);
}

TEST_CASE("ingest rejects non-binary labels without a threshold") {
    Fixture fx{"m1,u1,3,100\n"};
    CHECK_THROWS_WITH(ingest(fx.interactions, fx.items, fx.targets),
                      Catch::Matchers::ContainsSubstring("non-binary label"));
}

TEST_CASE("empty interactions file yields an empty corpus") {
    Fixture fx;
    const std::string empty = fx.dir.file("empty.csv", "");
    const Corpus c = ingest(empty, fx.items, fx.targets);
    CHECK(c.interactions().empty());
    const auto parts = partition_items(c, SplitConfig{.N = 200, .K = 20});
    CHECK(build_tasks(c, parts.old_ids, 5, 5, 1).empty());
}

TEST_CASE("malformed rows are reported with their line number") {
    Fixture fx{"m1,u1,1\n"};
    CHECK_THROWS_WITH(ingest(fx.interactions, fx.items, fx.targets),
                      Catch::Matchers::ContainsSubstring(":2"));
    Fixture fx2{"m1,u1,abc,100\n"};
    CHECK_THROWS_WITH(ingest(fx2.interactions, fx2.items, fx2.targets),
                      Catch::Matchers::ContainsSubstring("not a number"));
}

TEST_CASE("dangling ids are listed") {
    Fixture fx{"m9,u1,1,100\nm1,u9,1,100\n"};
    CHECK_THROWS_WITH(ingest(fx.interactions, fx.items, fx.targets),
                      Catch::Matchers::ContainsSubstring("m9") &&
                          Catch::Matchers::ContainsSubstring("u9"));
}

TEST_CASE("duplicate pairs collapse to the earliest timestamp") {
    Fixture fx{
        "m1,u1,0,300\n"
        "m1,u1,1,100\n"
        "m1,u1,0,200\n"};
    const Corpus c = ingest(fx.interactions, fx.items, fx.targets);
    const auto recs = c.records("m1");
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].timestamp == 100);
    CHECK(recs[0].label == 1);
}

TEST_CASE("ingesting already-binary labels twice is idempotent") {
    Fixture fx;
    const Corpus once = ingest(fx.interactions, fx.items, fx.targets);
    // re-emit and re-ingest
    std::string body = "item_id,target_id,label_or_score,timestamp\n";
    for (const auto& r : once.interactions())
        body += r.item_id + "," + r.target_id + "," + std::to_string(r.label) + "," +
                std::to_string(r.timestamp) + "\n";
    const std::string again = fx.dir.file("again.csv", body);
    const Corpus twice = ingest(again, fx.items, fx.targets);
    REQUIRE(twice.interactions().size() == once.interactions().size());
    for (std::size_t i = 0; i < once.interactions().size(); ++i)
        CHECK(twice.interactions()[i].label == once.interactions()[i].label);
}

TEST_CASE("split config rejects N < 3K") {
    CHECK_THROWS(SplitConfig{.N = 59, .K = 20}.validate());
    CHECK_NOTHROW(SplitConfig{.N = 60, .K = 20}.validate());
}

TEST_CASE("negative sampling adds the floor of ratio * positives") {
    std::vector<Interaction> recs;
    for (int i = 0; i < 10; ++i)
        recs.push_back({"it0", "tg" + std::to_string(i), 1, 100 + i});
    const Corpus c = make_corpus(1, 30, recs);

    SplitConfig cfg{.N = 9, .K = 3, .negative_ratio = 1.0, .seed = 7};
    const Corpus with_neg = sample_negatives(c, cfg);
    CHECK(with_neg.records("it0").size() == 20);
    int negs = 0;
    std::set<std::string> observed;
    for (const auto& r : with_neg.records("it0")) {
        if (r.label == 0) ++negs;
        CHECK(observed.insert(r.target_id + ":" + std::to_string(r.label)).second);
    }
    CHECK(negs == 10);

    SECTION("ratio zero leaves the corpus unchanged") {
        cfg.negative_ratio = 0.0;
        CHECK(sample_negatives(c, cfg).interactions().size() == 10);
    }
    SECTION("same seed gives identical negative sets") {
        const Corpus a = sample_negatives(c, cfg);
        const Corpus b = sample_negatives(c, cfg);
        REQUIRE(a.interactions().size() == b.interactions().size());
        for (std::size_t i = 0; i < a.interactions().size(); ++i) {
            CHECK(a.interactions()[i].target_id == b.interactions()[i].target_id);
            CHECK(a.interactions()[i].timestamp == b.interactions()[i].timestamp);
        }
    }
    SECTION("negatives inherit a paired positive timestamp") {
        const Corpus a = sample_negatives(c, cfg);
        std::set<std::int64_t> pos_ts;
        for (const auto& r : a.records("it0"))
            if (r.label == 1) pos_ts.insert(r.timestamp);
        for (const auto& r : a.records("it0"))
            if (r.label == 0) CHECK(pos_ts.count(r.timestamp) == 1);
    }
}

TEST_CASE("negative sampling fails when unobserved targets run out") {
    std::vector<Interaction> recs;
    for (int i = 0; i < 10; ++i)
        recs.push_back({"it0", "tg" + std::to_string(i), 1, 100 + i});
    const Corpus c = make_corpus(1, 15, recs);  // only 5 unobserved
    SplitConfig cfg{.N = 9, .K = 3, .negative_ratio = 1.0, .seed = 7};
    CHECK_THROWS_WITH(sample_negatives(c, cfg), Catch::Matchers::ContainsSubstring("it0"));
}

TEST_CASE("negative sampling requires an all-positive corpus") {
    const Corpus c = make_corpus(1, 5, {{"it0", "tg0", 0, 1}});
    CHECK_THROWS(sample_negatives(c, SplitConfig{.N = 60, .K = 20}));
}

TEST_CASE("partition thresholds follow the strict rules") {
    auto with_count = [](std::int64_t count) {
        std::vector<Interaction> recs;
        for (std::int64_t i = 0; i < count; ++i)
            recs.push_back({"it0", "tg" + std::to_string(i), 1, i});
        return make_corpus(1, static_cast<int>(count) + 1, recs);
    };
    const SplitConfig cfg{.N = 200, .K = 20};
    CHECK(partition_items(with_count(250), cfg).old_ids.count("it0") == 1);
    CHECK(partition_items(with_count(200), cfg).new_ids.count("it0") == 1);  // "more than N" is strict
    CHECK(partition_items(with_count(60), cfg).new_ids.count("it0") == 1);
    CHECK(partition_items(with_count(59), cfg).excluded_ids.count("it0") == 1);
}

TEST_CASE("partition is complete over random corpora") {
    Rng rng{2024};
    for (int trial = 0; trial < 20; ++trial) {
        const int n_items = 1 + static_cast<int>(rng.below(12));
        const int n_targets = 40;
        std::vector<Interaction> recs;
        for (int i = 0; i < n_items; ++i) {
            const auto count = rng.below(30);
            const auto picks = rng.sample_indices(n_targets, count);
            for (std::size_t j = 0; j < picks.size(); ++j)
                recs.push_back({"it" + std::to_string(i), "tg" + std::to_string(picks[j]), 1,
                                static_cast<std::int64_t>(rng.below(1000))});
        }
        const Corpus c = make_corpus(n_items, n_targets, recs);
        const SplitConfig cfg{.N = 15, .K = 4};
        const auto parts = partition_items(c, cfg);
        CHECK(parts.old_ids.size() + parts.new_ids.size() + parts.excluded_ids.size() ==
              static_cast<std::size_t>(n_items));
        for (const auto& id : parts.old_ids) {
            CHECK(parts.new_ids.count(id) == 0);
            CHECK(parts.excluded_ids.count(id) == 0);
        }
    }
}

TEST_CASE("build_tasks uses the earliest records as support") {
    std::vector<Interaction> recs;
    for (int i = 0; i < 12; ++i)
        recs.push_back({"it0", "tg" + std::to_string(i), i % 2, 100 - i});  // reverse time order
    const Corpus c = make_corpus(1, 12, recs);
    const auto tasks = build_tasks(c, {"it0"}, 4, 8, 11);
    REQUIRE(tasks.size() == 1);
    const Task& t = tasks[0];
    REQUIRE(t.support.size() == 4);
    REQUIRE(t.query.size() == 8);  // exactly the remainder
    for (const auto& s : t.support)
        for (const auto& q : t.query) CHECK(s.timestamp <= q.timestamp);
    // support + query together cover all records exactly once
    std::set<std::string> seen;
    for (const auto& r : t.support) seen.insert(r.target_id);
    for (const auto& r : t.query) CHECK(seen.insert(r.target_id).second);
    CHECK(seen.size() == 12);
}

TEST_CASE("build_tasks rejects an empty query size and skips short items") {
    const Corpus c = make_corpus(1, 5, {{"it0", "tg0", 1, 1}, {"it0", "tg1", 1, 2}});
    CHECK_THROWS_WITH(build_tasks(c, {"it0"}, 2, 0, 1),
                      Catch::Matchers::ContainsSubstring("query"));
    CHECK(build_tasks(c, {"it0"}, 2, 5, 1).empty());  // too few records: skipped, not fatal
}

TEST_CASE("build_tasks is deterministic under the seed") {
    std::vector<Interaction> recs;
    for (int i = 0; i < 30; ++i)
        recs.push_back({"it0", "tg" + std::to_string(i), 1, i});
    const Corpus c = make_corpus(1, 30, recs);
    const auto a = build_tasks(c, {"it0"}, 5, 10, 42);
    const auto b = build_tasks(c, {"it0"}, 5, 10, 42);
    const auto other = build_tasks(c, {"it0"}, 5, 10, 43);
    REQUIRE(a.size() == 1);
    REQUIRE(b.size() == 1);
    for (std::size_t i = 0; i < a[0].query.size(); ++i)
        CHECK(a[0].query[i].target_id == b[0].query[i].target_id);
    bool same = true;
    for (std::size_t i = 0; i < a[0].query.size(); ++i)
        same = same && a[0].query[i].target_id == other[0].query[i].target_id;
    CHECK_FALSE(same);
}

TEST_CASE("phase schedules split 3K + remainder") {
    auto schedule_for = [](int count) {
        std::vector<Interaction> recs;
        for (int i = 0; i < count; ++i)
            recs.push_back({"it0", "tg" + std::to_string(i), 1, i});
        const Corpus c = make_corpus(1, count, recs);
        return build_phase_schedule(c, "it0", 20);
    };
    const PhaseSchedule s75 = schedule_for(75);
    CHECK(s75.sets[0].size() == 20);
    CHECK(s75.sets[1].size() == 20);
    CHECK(s75.sets[2].size() == 20);
    CHECK(s75.sets[3].size() == 15);
    const PhaseSchedule s60 = schedule_for(60);
    CHECK(s60.sets[3].empty());

    std::vector<Interaction> few;
    for (int i = 0; i < 59; ++i) few.push_back({"it0", "tg" + std::to_string(i), 1, i});
    const Corpus c = make_corpus(1, 60, few);
    CHECK_THROWS(build_phase_schedule(c, "it0", 20));
}

TEST_CASE("equal timestamps break ties by target id") {
    std::vector<Interaction> recs;
    for (int i = 0; i < 9; ++i)
        recs.push_back({"it0", "tg" + std::to_string(8 - i), 1, 500});  // all same timestamp
    const Corpus c = make_corpus(1, 9, recs);
    const auto sched = build_phase_schedule(c, "it0", 3);
    std::vector<std::string> order;
    for (const auto& set : sched.sets)
        for (const auto& r : set) order.push_back(r.target_id);
    std::vector<std::string> expected = order;
    std::sort(expected.begin(), expected.end());
    CHECK(order == expected);
}

TEST_CASE("phase schedule conserves records and timestamp order") {
    Rng rng{555};
    for (int trial = 0; trial < 20; ++trial) {
        const int count = 12 + static_cast<int>(rng.below(40));
        std::vector<Interaction> recs;
        for (int i = 0; i < count; ++i)
            recs.push_back({"it0", "tg" + std::to_string(i), static_cast<int>(rng.below(2)),
                            static_cast<std::int64_t>(rng.below(50))});
        const Corpus c = make_corpus(1, count, recs);
        const int K = 4;
        const auto sched = build_phase_schedule(c, "it0", K);

        std::multiset<std::string> from_sets, from_corpus;
        for (const auto& set : sched.sets)
            for (const auto& r : set) from_sets.insert(r.target_id);
        for (const auto& r : c.records("it0")) from_corpus.insert(r.target_id);
        CHECK(from_sets == from_corpus);

        for (int p = 0; p + 1 < 4; ++p)
            for (const auto& a : sched.sets[static_cast<std::size_t>(p)])
                for (const auto& b : sched.sets[static_cast<std::size_t>(p + 1)])
                    CHECK(a.timestamp <= b.timestamp);
    }
}

TEST_CASE("corpus artifacts round-trip through files") {
    TempDir dir;
    std::vector<Interaction> recs;
    for (int i = 0; i < 30; ++i)
        recs.push_back({"it0", "tg" + std::to_string(i), i % 2, i});
    const Corpus c = make_corpus(1, 30, recs);

    const auto tasks = build_tasks(c, {"it0"}, 5, 10, 42);
    const std::string tasks_path = (dir.path / "tasks.jsonl").string();
    write_tasks(tasks_path, tasks);
    const auto tasks2 = read_tasks(tasks_path);
    REQUIRE(tasks2.size() == tasks.size());
    CHECK(tasks2[0].item_id == "it0");
    REQUIRE(tasks2[0].support.size() == tasks[0].support.size());
    CHECK(tasks2[0].support[0].item_id == "it0");
    CHECK(tasks2[0].support[0].target_id == tasks[0].support[0].target_id);
    CHECK(tasks2[0].support[0].label == tasks[0].support[0].label);

    const auto sched = build_phase_schedule(c, "it0", 5);
    const std::string sched_path = (dir.path / "schedules.jsonl").string();
    write_schedules(sched_path, {sched});
    const auto scheds2 = read_schedules(sched_path);
    REQUIRE(scheds2.size() == 1);
    for (int p = 0; p < 4; ++p)
        CHECK(scheds2[0].sets[static_cast<std::size_t>(p)].size() ==
              sched.sets[static_cast<std::size_t>(p)].size());

    const std::string ids_path = (dir.path / "ids.txt").string();
    write_id_file(ids_path, {"b", "a", "c"});
    CHECK(read_id_file(ids_path) == std::set<std::string>{"a", "b", "c"});
}
