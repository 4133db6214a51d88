#include <algorithm>
#include <catch2/catch_amalgamated.hpp>

#include "fixdiff/deriv_stoch.hpp"

using namespace fixdiff;

namespace {

MapSelection scalar_affine(double a, double c) {
    Mat a1(1, 1), a2(1, 1);
    a1(0, 0) = a;
    a2(0, 0) = c;
    return affine_map(a1, a2, Vec{0.0});
}

/// Scalar noisy model: That_x(w, l) = a_x w + l with a in {0.4, 0.6}
/// equiprobable (mean 0.5), d2 That = 1.
StochasticMapSelection scalar_noisy_model() {
    StochasticMapSelection s;
    s.state_dim = 1;
    s.param_dim = 1;
    s.full = scalar_affine(0.5, 1.0);
    s.population = {{0}, {1}};
    auto slope = [](const SampleToken& tok) { return tok[0] == 0 ? 0.4 : 0.6; };
    s.eval = [slope](const Vec& u, const Vec& lambda, const SampleToken& tok) {
        return Vec{slope(tok) * u[0] + lambda[0]};
    };
    s.vjp_state = [slope](const Vec&, const Vec&, const Vec& v, const SampleToken& tok) {
        return Vec{slope(tok) * v[0]};
    };
    s.vjp_param = [](const Vec&, const Vec&, const Vec& v, const SampleToken&) { return Vec{v[0]}; };
    s.jvp = [slope](const Vec&, const Vec&, const Vec& wdot, const Vec& ldot, const SampleToken& tok) {
        return Vec{slope(tok) * wdot[0] + ldot[0]};
    };
    return s;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("theoretical schedule constants") {
    {
        const auto [beta, gamma] = theoretical_schedule(0.5, 0.0);
        CHECK(beta == Catch::Approx(8.0 / 3.0).margin(1e-12));
        CHECK(gamma == Catch::Approx(8.0 / 3.0).margin(1e-12));
    }
    {
        const auto [beta, gamma] = theoretical_schedule(0.0, 0.3);
        CHECK(beta == Catch::Approx(2.0).margin(1e-12));
        CHECK(gamma == Catch::Approx(2.6).margin(1e-12));
    }
    {
        const auto [beta, gamma] = theoretical_schedule(0.9, 0.0);
        CHECK(beta == Catch::Approx(2.0 / 0.19).margin(1e-9));
        CHECK(gamma == beta);
    }
    CHECK_THROWS(theoretical_schedule(1.0));
}

TEST_CASE("step schedules") {
    const StepSchedule dec = StepSchedule::harmonic(0.5, 2.0);
    CHECK(dec.eta(1) == Catch::Approx(0.5 / 3.0));
    CHECK(dec.eta(10) == Catch::Approx(0.5 / 12.0));
    CHECK(dec.eta(1) >= dec.eta(2));

    const StepSchedule cst = StepSchedule::constant(0.5, 2.0);
    CHECK(cst.eta(1) == 0.25);
    CHECK(cst.eta(999) == 0.25);

    const StepSchedule fb = StepSchedule::from_b(1.0, 4.0, 8.0 / 3.0, StepSchedule::Kind::Harmonic);
    CHECK(fb.a1 == Catch::Approx(8.0 / 3.0));
    CHECK(fb.a2 == Catch::Approx(32.0 / 3.0));
}

TEST_CASE("stochastic linear solve reductions") {
    const MapSelection full = scalar_affine(0.5, 1.0);
    const StochasticMapSelection that = zero_variance_stochastic(full);
    const MapSelection g = identity_map(1, 1);
    const Vec w_t{2.0}, lambda{1.0}, y{1.0};
    const std::vector<SampleToken> xi2(10, SampleToken{0});
    {
        // constant eta = 1 with zero variance reproduces the AID-FP recursion
        const Vec v = stochastic_linear_solve(that, g, w_t, lambda, full.eval(w_t, lambda), y,
                                              StepSchedule::constant(1.0, 1.0), xi2, 3);
        CHECK(v == Vec{1.75});
    }
    {
        const Vec v = stochastic_linear_solve(that, g, w_t, lambda, full.eval(w_t, lambda), y,
                                              StepSchedule::constant(1.0, 1.0), xi2, 0);
        CHECK(v == Vec{0.0});
    }
}

TEST_CASE("stochastic linear solve converges on the scalar noisy model") {
    const StochasticMapSelection that = scalar_noisy_model();
    const MapSelection g = identity_map(1, 1);
    const Vec w_t{2.0}, lambda{1.0}, y{1.0};
    // Lemma D.2 schedule: sigma'_1 = Var[a] = 0.01, sigma2hat = 2 sigma'_1/(1-q)^2
    const double sigma2hat = 2.0 * 0.01 / 0.25;
    const auto [beta, gamma] = theoretical_schedule(0.5, sigma2hat);
    const StepSchedule sched = StepSchedule::harmonic(beta, gamma);
    const int k = 10000;
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SampleStreams streams = SampleStreams::draw(seed, 1, k, 2, 1);
        const Vec v = stochastic_linear_solve(that, g, w_t, lambda, Vec{2.0}, y, sched, streams.xi2,
                                              k, 0.5);
        errs.push_back(std::abs(v[0] - 2.0));
    }
    CHECK(median(errs) <= 0.05);
}

TEST_CASE("nsid consistency reductions") {
    Rng rng(97);
    Mat a1(4, 4);
    for (auto& v : a1.a) v = rng.next_gaussian();
    const double scale = 0.6 / spectral_norm(a1);
    for (auto& v : a1.a) v *= scale;
    Mat a2(4, 3);
    for (auto& v : a2.a) v = rng.next_gaussian();
    const MapSelection t_full = affine_map(a1, a2, gaussian(rng, 4));
    const MapSelection g = soft_threshold_map(4, 3, 0.05);
    const MapSelection phi = compose(g, t_full);

    const Vec lambda = gaussian(rng, 3);
    const Vec w_t = fixed_point_solve(phi, lambda, Vec(4, 0.0), 60, false).last;
    const Vec y = gaussian(rng, 4);
    const int k = 7;

    const SampleStreams streams = SampleStreams::draw(123, 1, k, 1, 1);
    const DerivEstimate est = nsid(zero_variance_stochastic(t_full), g, w_t, lambda, y, k, 1,
                                   StepSchedule::constant(1.0, 1.0), streams);
    const DerivEstimate ref = aid_fp_vjp(phi, w_t, lambda, y, k);
    CHECK(norm2(est.value - ref.value) <= 1e-12 * std::max(1.0, norm2(ref.value)));

    // y = 0 gives 0
    const DerivEstimate zero = nsid(zero_variance_stochastic(t_full), g, w_t, lambda, Vec(4, 0.0),
                                    k, 1, StepSchedule::constant(1.0, 1.0), streams);
    CHECK(norm2(zero.value) == 0.0);
}

TEST_CASE("sid reductions") {
    const MapSelection full = scalar_affine(0.5, 1.0);
    const StochasticMapSelection that = zero_variance_stochastic(full);
    const Vec w_t{2.0}, lambda{1.0}, y{1.0};
    const StepSchedule sched = StepSchedule::harmonic(8.0 / 3.0, 8.0 / 3.0);
    const SampleStreams streams = SampleStreams::draw(7, 5, 50, 1, 1);
    {
        // zero variance: the fold bias vanishes and SID matches NSID
        const MapSelection g = soft_threshold_map(1, 1, 0.1);
        const DerivEstimate a = nsid(that, g, w_t, lambda, y, 50, 5, sched, streams);
        const DerivEstimate b = sid_baseline(that, g, w_t, lambda, y, 50, 5, sched, streams);
        CHECK(norm2(a.value - b.value) <= 1e-12 * std::max(1.0, norm2(a.value)));
        CHECK(b.method == Method::Sid);
    }
    {
        // identity outer map: SID equals NSID by construction
        const StochasticMapSelection noisy = scalar_noisy_model();
        const MapSelection id = identity_map(1, 1);
        const SampleStreams st = SampleStreams::draw(11, 5, 50, 2, 1);
        const DerivEstimate a = nsid(noisy, id, w_t, lambda, y, 50, 5, sched, st);
        const DerivEstimate b = sid_baseline(noisy, id, w_t, lambda, y, 50, 5, sched, st);
        CHECK(norm2(a.value - b.value) == 0.0);
    }
}

TEST_CASE("token streams: determinism, independence, population coverage") {
    const SampleStreams a = SampleStreams::draw(42, 8, 16, 100, 10);
    const SampleStreams b = SampleStreams::draw(42, 8, 16, 100, 10);
    CHECK(a.xi1 == b.xi1);
    CHECK(a.xi2 == b.xi2);

    const SampleStreams c = SampleStreams::draw(43, 8, 16, 100, 10);
    CHECK(a.xi1 != c.xi1);

    // streams are disjoint in lineage: xi1 and xi2 differ even at equal shape
    const SampleStreams d = SampleStreams::draw(42, 8, 8, 100, 10);
    CHECK(d.xi1 != d.xi2);

    for (const auto& tok : a.xi1) {
        CHECK(tok.size() == 10);
        for (const auto idx : tok) {
            CHECK(idx >= 0);
            CHECK(idx < 100);
        }
        // without replacement within a token
        SampleToken sorted = tok;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    }
}

TEST_CASE("nsid determinism and stream sensitivity on the noisy model") {
    const StochasticMapSelection that = scalar_noisy_model();
    const MapSelection g = identity_map(1, 1);
    const Vec w_t{2.0}, lambda{1.0}, y{1.0};
    const StepSchedule sched = StepSchedule::harmonic(8.0 / 3.0, 8.0 / 3.0);
    const SampleStreams s1 = SampleStreams::draw(5, 20, 200, 2, 1);
    const SampleStreams s2 = SampleStreams::draw(5, 20, 200, 2, 1);
    const SampleStreams s3 = SampleStreams::draw(6, 20, 200, 2, 1);
    const DerivEstimate a = nsid(that, g, w_t, lambda, y, 200, 20, sched, s1, 0.5);
    const DerivEstimate b = nsid(that, g, w_t, lambda, y, 200, 20, sched, s2, 0.5);
    const DerivEstimate c = nsid(that, g, w_t, lambda, y, 200, 20, sched, s3, 0.5);
    CHECK(a.value == b.value);
    CHECK(a.value != c.value);
    CHECK(a.seed == 5);
}

TEST_CASE("nsid 1/k rate on the scalar noisy model") {
    const StochasticMapSelection that = scalar_noisy_model();
    const MapSelection g = identity_map(1, 1);
    const Vec w_t{2.0}, lambda{1.0}, y{1.0};
    const double sigma2hat = 2.0 * 0.01 / 0.25;
    const auto [beta, gamma] = theoretical_schedule(0.5, sigma2hat);
    const StepSchedule sched = StepSchedule::harmonic(beta, gamma);
    std::vector<double> kmse;
    for (const int k : {100, 1000, 10000}) {
        std::vector<double> sq;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const SampleStreams streams = SampleStreams::draw(seed, 1, k, 2, 1);
            const DerivEstimate est = nsid(that, g, w_t, lambda, y, k, 1, sched, streams, 0.5);
            const double e = est.value[0] - 2.0;
            sq.push_back(e * e);
        }
        kmse.push_back(static_cast<double>(k) * median(sq));
    }
    for (std::size_t i = 1; i < kmse.size(); ++i) {
        const double ratio = kmse[i] / kmse[0];
        CHECK(ratio >= 1.0 / 3.0);
        CHECK(ratio <= 3.0);
    }
}

TEST_CASE("divergence guard") {
    // an expanding sampler blows up the recursion under a constant step of 1
    StochasticMapSelection bad = scalar_noisy_model();
    bad.vjp_state = [](const Vec&, const Vec&, const Vec& v, const SampleToken&) {
        return Vec{3.0 * v[0]};
    };
    const MapSelection g = identity_map(1, 1);
    const std::vector<SampleToken> xi2(200, SampleToken{0});
    CHECK_THROWS_WITH(stochastic_linear_solve(bad, g, Vec{2.0}, Vec{1.0}, Vec{2.0}, Vec{1.0},
                                              StepSchedule::constant(1.0, 1.0), xi2, 200, 0.5),
                      Catch::Matchers::StartsWith("linear-solve divergence"));
}
