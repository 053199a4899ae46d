#include <catch2/catch_amalgamated.hpp>

#include "emerflow/serialize.hpp"

using namespace emerflow;

namespace {

Item item_with(std::vector<FeatureValue> fs) { return Item{"x", "movie", std::move(fs)}; }

AugmentedFeatureSet augmented_with(std::vector<FeatureValue> fs) {
    return AugmentedFeatureSet{"x", std::move(fs)};
}

}  // namespace

TEST_CASE("serialize_feature renders the exact template") {
    CHECK(serialize_feature({"Release Year", "1992"}) == "<Release Year>: 1992");
    CHECK(serialize_feature({"Genres", ""}) == "<Genres>: ");
    CHECK(serialize_feature({"Title", "Top Gun"}) == "<Title>: Top Gun");
    CHECK_THROWS(serialize_feature({"", "x"}));
}

TEST_CASE("serialize_item concatenates raw then augmented") {
    const Item item = item_with({{"Title", "Top Gun"}});
    const AugmentedFeatureSet afs = augmented_with({{"Director", "Tony Scott"}});

    CHECK(serialize_item(item, &afs, SerializeMode::full).text ==
          "<Title>: Top Gun; <Director>: Tony Scott");
    CHECK(serialize_item(item, &afs, SerializeMode::raw_only).text == "<Title>: Top Gun");
    CHECK(serialize_item(item, &afs, SerializeMode::augmented_only).text ==
          "<Director>: Tony Scott");
    CHECK(serialize_item(item, nullptr, SerializeMode::full).text == "<Title>: Top Gun");
}

TEST_CASE("serialize_item errors when nothing remains") {
    const Item empty = item_with({});
    CHECK_THROWS(serialize_item(empty, nullptr, SerializeMode::full));
    const Item item = item_with({{"Title", "Top Gun"}});
    CHECK_THROWS(serialize_item(item, nullptr, SerializeMode::augmented_only));
    const AugmentedFeatureSet no_features = augmented_with({});
    CHECK_THROWS(serialize_item(empty, &no_features, SerializeMode::full));
}

TEST_CASE("mode algebra holds on random feature lists") {
    Rng rng{314};
    auto random_name = [&](int i) {
        return "F" + std::to_string(i) + "_" + std::to_string(rng.below(1000));
    };
    auto random_content = [&] {
        std::string s;
        const auto len = rng.below(12);
        for (std::uint64_t i = 0; i < len; ++i)
            s += static_cast<char>('a' + rng.below(26));
        return s;
    };
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<FeatureValue> raw, aug;
        const auto n_raw = 1 + rng.below(5);
        const auto n_aug = 1 + rng.below(5);
        for (std::uint64_t i = 0; i < n_raw; ++i)
            raw.push_back({random_name(static_cast<int>(i)), random_content()});
        for (std::uint64_t i = 0; i < n_aug; ++i)
            aug.push_back({"A" + random_name(static_cast<int>(i)), random_content()});
        const Item item = item_with(raw);
        const AugmentedFeatureSet afs = augmented_with(aug);

        const std::string full = serialize_item(item, &afs, SerializeMode::full).text;
        const std::string raw_only = serialize_item(item, &afs, SerializeMode::raw_only).text;
        const std::string aug_only = serialize_item(item, &afs, SerializeMode::augmented_only).text;
        CHECK(full == raw_only + "; " + aug_only);
    }
}

TEST_CASE("serialization is injective for separator-free contents") {
    const Item a = item_with({{"X", "one"}, {"Y", "two"}});
    const Item b = item_with({{"X", "one"}, {"Y", "owt"}});
    const Item c = item_with({{"Y", "one"}, {"X", "two"}});
    const auto ta = serialize_item(a, nullptr, SerializeMode::full).text;
    CHECK(ta != serialize_item(b, nullptr, SerializeMode::full).text);
    CHECK(ta != serialize_item(c, nullptr, SerializeMode::full).text);
}

TEST_CASE("character cap truncates at a feature boundary") {
    const Item item = item_with({{"A", "12345"}, {"B", "67890"}, {"C", "end"}});
    // "<A>: 12345" is 10 chars, "; <B>: 67890" would push past 15
    const auto s = serialize_item(item, nullptr, SerializeMode::full, 15);
    CHECK(s.text == "<A>: 12345");
    // a lone oversized feature is hard-capped, never empty
    const Item big = item_with({{"A", std::string(100, 'x')}});
    const auto t = serialize_item(big, nullptr, SerializeMode::full, 10);
    CHECK(t.text.size() == 10);
    CHECK(!t.text.empty());
}
