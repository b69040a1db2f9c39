#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "posbd/rng.hpp"

using namespace posbd;

TEST_CASE("same seed gives identical streams") {
    auto a = CounterRng::from_seed(42);
    auto b = CounterRng::from_seed(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("derived streams do not depend on parent draw position") {
    auto a = CounterRng::from_seed(7);
    auto b = CounterRng::from_seed(7);
    (void)a.next_u64();
    (void)a.next_u64();
    auto da = a.derive("child");
    auto db = b.derive("child");
    for (int i = 0; i < 20; ++i) REQUIRE(da.next_u64() == db.next_u64());
}

TEST_CASE("different tags give different streams") {
    auto r = CounterRng::from_seed(7);
    auto a = r.derive("x");
    auto b = r.derive("y");
    REQUIRE(a.next_u64() != b.next_u64());
}

TEST_CASE("next_double in unit interval") {
    auto r = CounterRng::from_seed(1);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.next_double();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("next_below bounds and determinism") {
    auto r = CounterRng::from_seed(3);
    for (int i = 0; i < 1000; ++i) REQUIRE(r.next_below(17) < 17);
    REQUIRE_THROWS(r.next_below(0));
}

TEST_CASE("shuffle is a permutation and seed-deterministic") {
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    auto v2 = v;
    auto r1 = CounterRng::from_seed(9).derive("shuffle");
    auto r2 = CounterRng::from_seed(9).derive("shuffle");
    r1.shuffle(v);
    r2.shuffle(v2);
    REQUIRE(v == v2);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) REQUIRE(sorted[i] == i);
}

TEST_CASE("gaussian draws are finite and roughly centered") {
    auto r = CounterRng::from_seed(11);
    double sum = 0.0;
    for (int i = 0; i < 4000; ++i) {
        const double g = r.next_gauss();
        REQUIRE(std::isfinite(g));
        sum += g;
    }
    REQUIRE(std::abs(sum / 4000.0) < 0.1);
}
