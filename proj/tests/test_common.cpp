#include <catch2/catch_amalgamated.hpp>

#include "emerflow/common.hpp"

using namespace emerflow;

TEST_CASE("fnv1a64 is stable") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("negatives") != fnv1a64("tasks"));
}

TEST_CASE("subseed streams are independent per name") {
    CHECK(subseed(42, "a") != subseed(42, "b"));
    CHECK(subseed(42, "a") == subseed(42, "a"));
}

TEST_CASE("rng is reproducible and in range") {
    Rng a{7}, b{7};
    for (int i = 0; i < 100; ++i) {
        const double x = a.uniform();
        CHECK(x == b.uniform());
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    Rng c{7};
    for (int i = 0; i < 100; ++i) {
        const auto v = c.below(13);
        CHECK(v < 13);
    }
}

TEST_CASE("rng shuffle and sampling are deterministic") {
    std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> v2 = v1;
    Rng a{99}, b{99};
    a.shuffle(v1);
    b.shuffle(v2);
    CHECK(v1 == v2);

    Rng c{5}, d{5};
    CHECK(c.sample_indices(50, 10) == d.sample_indices(50, 10));
    const auto s = Rng{5}.sample_indices(50, 10);
    std::set<std::size_t> distinct(s.begin(), s.end());
    CHECK(distinct.size() == 10);
}

TEST_CASE("rng normal has roughly unit variance") {
    Rng rng{123};
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("string utilities") {
    CHECK(trim("  a b  ") == "a b");
    CHECK(lower("AbC") == "abc");
    CHECK(split("a,b,,c", ',') == std::vector<std::string>{"a", "b", "", "c"});
    CHECK(split("", ',') == std::vector<std::string>{""});
    CHECK(format_sig9(0.1) == "0.1");
}
