#include <catch2/catch_amalgamated.hpp>

#include "fixdiff/bilevel.hpp"
#include "fixdiff/problems.hpp"
#include "fixdiff/reference.hpp"

using namespace fixdiff;

namespace {

MapSelection scalar_affine(double a, double c) {
    Mat a1(1, 1), a2(1, 1);
    a1(0, 0) = a;
    a2(0, 0) = c;
    return affine_map(a1, a2, Vec{0.0});
}

UpperLevel linear_in_w() {
    UpperLevel e;
    e.state_dim = 1;
    e.param_dim = 1;
    e.eval = [](const Vec& w, const Vec&) { return w[0]; };
    e.grad_state = [](const Vec&, const Vec&) { return Vec{1.0}; };
    e.grad_param = [](const Vec&, const Vec&) { return Vec{0.0}; };
    return e;
}

UpperLevel half_square() {
    UpperLevel e;
    e.state_dim = 1;
    e.param_dim = 1;
    e.eval = [](const Vec& w, const Vec&) { return 0.5 * w[0] * w[0]; };
    e.grad_state = [](const Vec& w, const Vec&) { return Vec{w[0]}; };
    e.grad_param = [](const Vec&, const Vec&) { return Vec{0.0}; };
    return e;
}

}  // namespace

TEST_CASE("bitd hypergradient") {
    const MapSelection phi = scalar_affine(0.5, 1.0);
    const Vec lambda{1.0};
    {
        const Trajectory traj = fixed_point_solve(phi, lambda, Vec{0.0}, 3);
        CHECK(bitd_hypergrad(linear_in_w(), phi, traj, lambda) == Vec{1.75});
    }
    {
        // E independent of w: exactly d2 E
        UpperLevel e = linear_in_w();
        e.grad_state = [](const Vec&, const Vec&) { return Vec{0.0}; };
        e.grad_param = [](const Vec&, const Vec& l) { return Vec{3.0 * l[0]}; };
        const Trajectory traj = fixed_point_solve(phi, lambda, Vec{0.0}, 5);
        CHECK(bitd_hypergrad(e, phi, traj, lambda) == Vec{3.0});
    }
    {
        // E = w^2/2, w(l) = 2l: hypergradient -> w(l) w'(l) = 4 at l = 1
        const Trajectory traj = fixed_point_solve(phi, lambda, Vec{0.0}, 60);
        CHECK(bitd_hypergrad(half_square(), phi, traj, lambda)[0] == Catch::Approx(4.0).margin(1e-6));
    }
}

TEST_CASE("baid-fp hypergradient") {
    const MapSelection phi = scalar_affine(0.5, 1.0);
    const Vec lambda{1.0};
    const Vec w_t = fixed_point_solve(phi, lambda, Vec{0.0}, 60, false).last;
    CHECK(baid_fp_hypergrad(half_square(), phi, w_t, lambda, 60)[0] == Catch::Approx(4.0).margin(1e-6));

    UpperLevel e = half_square();
    e.grad_param = [](const Vec&, const Vec&) { return Vec{7.0}; };
    CHECK(baid_fp_hypergrad(e, phi, w_t, lambda, 0) == Vec{7.0});
}

TEST_CASE("baid-fp agrees with finite differences on a small elastic net") {
    const ElasticNetData data = gen_elastic_net(202, 30, 12, 6, false);
    const ProblemSpec spec = build_elastic_net(data.train, data.val);
    const Vec lambda{0.05, 0.4};
    const int t = 300, k = 300;
    auto f_t = [&](const Vec& l) {
        const Vec w = fixed_point_solve(spec.phi, l, Vec(static_cast<std::size_t>(spec.d), 0.0), t,
                                        false)
                          .last;
        return spec.E.eval(w, l);
    };
    const Vec fd = finite_diff_hypergrad(f_t, lambda, 1e-5);
    const Vec w_t =
        fixed_point_solve(spec.phi, lambda, Vec(static_cast<std::size_t>(spec.d), 0.0), t, false).last;
    const Vec hg = baid_fp_hypergrad(spec.E, spec.phi, w_t, lambda, k);
    CHECK(norm2(hg - fd) <= 1e-4 * std::max(1.0, norm2(fd)));
}

TEST_CASE("nsid-bilevel reductions") {
    Rng rng(101);
    Mat a1(3, 3);
    for (auto& v : a1.a) v = rng.next_gaussian();
    const double scale = 0.55 / spectral_norm(a1);
    for (auto& v : a1.a) v *= scale;
    Mat a2(3, 2);
    for (auto& v : a2.a) v = rng.next_gaussian();
    const MapSelection t_full = affine_map(a1, a2, gaussian(rng, 3));
    const MapSelection g = soft_threshold_map(3, 2, 0.02);
    const MapSelection phi = compose(g, t_full);
    const Vec lambda = gaussian(rng, 2);
    const Vec w_t = fixed_point_solve(phi, lambda, Vec(3, 0.0), 80, false).last;

    UpperLevel e;
    e.state_dim = 3;
    e.param_dim = 2;
    e.eval = [](const Vec& w, const Vec&) { return 0.5 * dot(w, w); };
    e.grad_state = [](const Vec& w, const Vec&) { return w; };
    e.grad_param = [](const Vec&, const Vec& l) { return Vec{0.1 * l[0], -0.2 * l[1]}; };
    StochasticUpperLevel es;
    es.full = e;
    es.population = 1;
    es.eval = [e](const Vec& w, const Vec& l, const SampleToken&) { return e.eval(w, l); };
    es.grad_state = [e](const Vec& w, const Vec& l, const SampleToken&) { return e.grad_state(w, l); };
    es.grad_param = [e](const Vec& w, const Vec& l, const SampleToken&) { return e.grad_param(w, l); };

    const int k = 9;
    const SampleStreams streams = SampleStreams::draw(31, 1, k, 1, 1);
    const std::vector<SampleToken> zeta{{0}};
    const Vec got = nsid_bilevel(es, zero_variance_stochastic(t_full), g, w_t, lambda, k, 1, 1,
                                 StepSchedule::constant(1.0, 1.0), streams, zeta);
    const Vec want = baid_fp_hypergrad(e, phi, w_t, lambda, k);
    CHECK(norm2(got - want) <= 1e-12 * std::max(1.0, norm2(want)));

    // d1 E = 0 population-wise: only the d2 Ebar term survives
    StochasticUpperLevel flat = es;
    flat.grad_state = [](const Vec&, const Vec&, const SampleToken&) { return Vec(3, 0.0); };
    const Vec only_param = nsid_bilevel(flat, zero_variance_stochastic(t_full), g, w_t, lambda, k, 1,
                                        1, StepSchedule::constant(1.0, 1.0), streams, zeta);
    CHECK(norm2(only_param - e.grad_param(w_t, lambda)) == 0.0);
}

TEST_CASE("outer loop") {
    {
        // zero hypergradient: lambda stays put
        auto trace = outer_loop(
            Vec{1.5}, [](const Vec&) { return Vec{0.0}; }, [](const Vec&) { return 2.0; },
            [](const Vec& l) { return l; }, 5, 0.1);
        for (const auto& [l, f] : trace) {
            CHECK(l == Vec{1.5});
            CHECK(f == 2.0);
        }
    }
    {
        // quadratic toy bilevel: w(l) = 2l, f(l) = 2 l^2, hypergrad 4l, minimizer 0
        const MapSelection phi = scalar_affine(0.5, 1.0);
        auto hg = [&](const Vec& l) {
            const Trajectory traj = fixed_point_solve(phi, l, Vec{0.0}, 60);
            return bitd_hypergrad(half_square(), phi, traj, l);
        };
        auto obj = [&](const Vec& l) {
            const Vec w = fixed_point_solve(phi, l, Vec{0.0}, 60, false).last;
            return 0.5 * w[0] * w[0];
        };
        auto trace = outer_loop(Vec{1.0}, hg, obj, [](const Vec& l) { return l; }, 25, 0.1);
        for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i].second <= trace[i - 1].second + 1e-12);
        CHECK(trace.back().second <= 1e-3);
    }
    {
        // projection onto the nonnegative orthant keeps iterates nonnegative
        auto trace = outer_loop(
            Vec{0.2, 0.1}, [](const Vec&) { return Vec{1.0, 1.0}; },
            [](const Vec&) { return 0.0; },
            [](const Vec& l) {
                Vec p = l;
                for (auto& v : p) v = std::max(v, 0.0);
                return p;
            },
            10, 0.5);
        for (const auto& [l, f] : trace)
            for (double v : l) CHECK(v >= 0.0);
    }
}
