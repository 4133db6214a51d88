#include <catch2/catch_amalgamated.hpp>

#include "fixdiff/linalg.hpp"

using namespace fixdiff;

TEST_CASE("spectral norm on fixed matrices") {
    Mat zero(1, 1);
    CHECK(spectral_norm(zero) == 0.0);

    CHECK(spectral_norm(Mat::identity(3)) == Catch::Approx(1.0).margin(1e-12));

    Mat diag(2, 2);
    diag(0, 0) = 3.0;
    diag(1, 1) = 4.0;
    CHECK(spectral_norm(diag) == Catch::Approx(4.0).margin(1e-10));

    Mat bad(1, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(spectral_norm(bad), "non-finite matrix");
}

TEST_CASE("spectral norm scales homogeneously") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int r = 1 + static_cast<int>(rng.next_index(5));
        const int c = 1 + static_cast<int>(rng.next_index(5));
        Mat m(r, c);
        for (auto& v : m.a) v = 2.0 * rng.next_uniform() - 1.0;
        const double alpha = 4.0 * rng.next_uniform() - 2.0;
        Mat scaled = m;
        for (auto& v : scaled.a) v *= alpha;
        CHECK(spectral_norm(scaled) ==
              Catch::Approx(std::abs(alpha) * spectral_norm(m)).margin(1e-9));
    }
}

TEST_CASE("solve_dense on fixed systems") {
    CHECK(solve_dense(Mat::identity(2), Vec{1.0, 2.0}) == Vec{1.0, 2.0});

    Mat diag(2, 2);
    diag(0, 0) = 2.0;
    diag(1, 1) = 4.0;
    CHECK(solve_dense(diag, Vec{2.0, 4.0}) == Vec{1.0, 1.0});

    Mat upper(2, 2);
    upper(0, 0) = 1.0;
    upper(0, 1) = 1.0;
    upper(1, 1) = 1.0;
    const Vec x = solve_dense(upper, Vec{3.0, 1.0});
    CHECK(x[0] == Catch::Approx(2.0).margin(1e-14));
    CHECK(x[1] == Catch::Approx(1.0).margin(1e-14));

    Mat singular(2, 2, 1.0);
    CHECK_THROWS_WITH(solve_dense(singular, Vec{1.0, 1.0}),
                      Catch::Matchers::StartsWith("singular system at pivot"));
}

TEST_CASE("solve_dense residual bound on random well-conditioned systems") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_index(7));
        Mat a(n, n);
        for (auto& v : a.a) v = 2.0 * rng.next_uniform() - 1.0;
        for (int i = 0; i < n; ++i) a(i, i) += static_cast<double>(n);  // keeps conditioning mild
        Vec b = gaussian(rng, n);
        const Vec x = solve_dense(a, b);
        const Vec r = matvec(a, x) - b;
        CHECK(norm2(r) <= 1e-9 * (frobenius_norm(a) * norm2(x) + norm2(b)));
    }
}

TEST_CASE("extreme_eigs_gram on fixed designs") {
    {
        const auto [big, small] = extreme_eigs_gram(Mat::identity(2));
        CHECK(big == Catch::Approx(0.5).margin(1e-10));
        CHECK(small == Catch::Approx(0.5).margin(1e-10));
    }
    {
        Mat x(2, 2);
        x(0, 0) = 1.0;
        const auto [big, small] = extreme_eigs_gram(x);
        CHECK(big == Catch::Approx(0.5).margin(1e-10));
        CHECK(small == Catch::Approx(0.0).margin(1e-10));
    }
    {
        const auto [big, small] = extreme_eigs_gram(Mat(3, 3));
        CHECK(big == 0.0);
        CHECK(small == 0.0);
    }
}

TEST_CASE("extreme_eigs_gram with a known spectrum") {
    // X = sqrt(n) * diag(s), so n^{-1} X^T X = diag(s^2).
    const int d = 5;
    const Vec s{1.7, 0.9, 0.4, 2.2, 0.05};
    Mat x(d, d);
    for (int i = 0; i < d; ++i) x(i, i) = std::sqrt(static_cast<double>(d)) * s[static_cast<std::size_t>(i)];
    const auto [big, small] = extreme_eigs_gram(x);
    CHECK(big == Catch::Approx(2.2 * 2.2).epsilon(1e-8));
    CHECK(small == Catch::Approx(0.05 * 0.05).epsilon(1e-8));
    CHECK(big >= small);
    CHECK(small >= 0.0);
}

TEST_CASE("gaussian sampling") {
    Rng rng(3);
    CHECK(gaussian(rng, 0).empty());

    Rng a(99), b(99);
    CHECK(gaussian(a, 64) == gaussian(b, 64));

    Rng rng0(0);
    const Vec draws = gaussian(rng0, 100000);
    double mean = 0.0;
    for (double v : draws) mean += v;
    mean /= static_cast<double>(draws.size());
    double var = 0.0;
    for (double v : draws) var += (v - mean) * (v - mean);
    var /= static_cast<double>(draws.size());
    CHECK(std::abs(mean) <= 0.02);
    CHECK(std::abs(var - 1.0) <= 0.05);
}

TEST_CASE("rng streams are seed-deterministic and seed-sensitive") {
    Rng a(1234), b(1234), c(1235);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 1000; ++i) {
        const auto va = a.next_u64();
        all_equal = all_equal && (va == b.next_u64());
        any_diff = any_diff || (va != c.next_u64());
    }
    CHECK(all_equal);
    CHECK(any_diff);
    CHECK(derive_seed(42, 1) != derive_seed(42, 2));
}
