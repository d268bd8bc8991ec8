#include <catch2/catch_amalgamated.hpp>

#include "hymate/rng.hpp"
#include "hymate/tensor.hpp"

using namespace hymate;

TEST_CASE("tensor shape/data invariant") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ContractViolation);
    Tensor t = Tensor::mat(2, 2, {1, 2, 3, 4});
    CHECK(t.at(1, 0) == 3.0);
    CHECK(t.numel() == 4);
    CHECK(t.all_finite());
    t.at(0, 1) = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng determinism and substreams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());

    Rng c(42);
    Rng s1 = c.substream("data");
    Rng s2 = c.substream("init");
    CHECK(s1.u64() != s2.u64());
    Rng s1b = Rng(42).substream("data");
    Rng s1c = Rng(42).substream("data");
    CHECK(s1b.u64() == s1c.u64());
}

TEST_CASE("rng uniform range and normal moments") {
    Rng r(7);
    double mn = 1.0, mx = 0.0;
    for (int i = 0; i < 10000; ++i) {
        double u = r.uniform();
        mn = std::min(mn, u);
        mx = std::max(mx, u);
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    CHECK(mn < 0.01);
    CHECK(mx > 0.99);

    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double z = r.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("rng poisson mean, including large rates") {
    Rng r(11);
    for (double lambda : {0.5, 6.0, 819.0}) {
        double sum = 0.0;
        const int n = lambda > 100 ? 300 : 3000;
        for (int i = 0; i < n; ++i) sum += static_cast<double>(r.poisson(lambda));
        const double mean = sum / n;
        CHECK(std::abs(mean - lambda) < 5.0 * std::sqrt(lambda / n) + 0.05);
    }
}

TEST_CASE("rng shuffle is a permutation and deterministic") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    Rng r(3);
    r.shuffle(v);
    std::vector<int> w = v;
    std::sort(w.begin(), w.end());
    CHECK(w == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    std::vector<int> v2{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    Rng r2(3);
    r2.shuffle(v2);
    CHECK(v == v2);
}
