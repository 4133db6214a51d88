#pragma once

// Stochastic estimation: step schedules, the stochastic fixed-point linear
// solver, NSID, and the (biased) SID baseline that folds the outer map into
// each sample.

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fixdiff/deriv_det.hpp"
#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"

namespace fixdiff {

struct StepSchedule {
    enum class Kind { Constant, Harmonic };
    Kind kind = Kind::Harmonic;
    double a1 = 1.0;
    double a2 = 1.0;

    static StepSchedule constant(double a1, double a2) { return {Kind::Constant, a1, a2}; }
    static StepSchedule harmonic(double a1, double a2) { return {Kind::Harmonic, a1, a2}; }
    /// (b1, b2, beta) parameterization: a1 = b1*beta, a2 = b2*beta.
    static StepSchedule from_b(double b1, double b2, double beta, Kind kind) {
        return {kind, b1 * beta, b2 * beta};
    }

    /// Step for iteration i >= 1.
    double eta(int i) const {
        return kind == Kind::Constant ? a1 / a2 : a1 / (a2 + static_cast<double>(i));
    }
    const char* kind_name() const { return kind == Kind::Constant ? "const" : "dec"; }
};

/// The (beta, gamma) pair for the harmonic schedule eta_i = beta/(gamma+i):
/// beta = 2/(1-q^2), gamma = 2(1+sigma2hat)/(1-q^2).
inline std::pair<double, double> theoretical_schedule(double q, double sigma2hat = 0.0) {
    if (q < 0.0 || q >= 1.0) throw std::invalid_argument("theoretical_schedule: need 0 <= q < 1");
    if (sigma2hat < 0.0) throw std::invalid_argument("theoretical_schedule: sigma2hat must be >= 0");
    const double beta = 2.0 / (1.0 - q * q);
    const double gamma = 2.0 * (1.0 + sigma2hat) / (1.0 - q * q);
    return {beta, gamma};
}

/// Draws `count` minibatch tokens of size `batch` from a population of
/// `population` row indices, sampling without replacement within each token.
inline std::vector<SampleToken> draw_tokens(Rng& rng, int count, std::int64_t population,
                                            std::int64_t batch) {
    if (population <= 0 || batch <= 0 || batch > population)
        throw std::invalid_argument("draw_tokens: bad batch/population");
    std::vector<SampleToken> tokens;
    tokens.reserve(static_cast<std::size_t>(count));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(population));
    for (int c = 0; c < count; ++c) {
        std::iota(idx.begin(), idx.end(), 0);
        SampleToken tok(static_cast<std::size_t>(batch));
        for (std::int64_t j = 0; j < batch; ++j) {
            const std::int64_t pick = j + rng.next_index(population - j);
            std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(pick)]);
            tok[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j)];
        }
        tokens.push_back(std::move(tok));
    }
    return tokens;
}

/// Two independent token streams with disjoint seed lineage: xi1 (length J)
/// drives the minibatch mean and the d2 terms, xi2 (length k) drives only
/// the stochastic linear solve.
struct SampleStreams {
    std::vector<SampleToken> xi1;
    std::vector<SampleToken> xi2;
    std::uint64_t seed = 0;

    static SampleStreams draw(std::uint64_t seed, int J, int k, std::int64_t population,
                              std::int64_t batch) {
        SampleStreams s;
        s.seed = seed;
        Rng rng1(derive_seed(seed, 1));
        Rng rng2(derive_seed(seed, 2));
        s.xi1 = draw_tokens(rng1, J, population, batch);
        s.xi2 = draw_tokens(rng2, k, population, batch);
        return s;
    }
};

/// Stochastic fixed-point iteration for the linear system
///   (I - d1 T(w_t,l)^T d1 G(Tbar_t,l)^T) v = y:
///   v_0 = 0;  v_i = (1-eta_i) v_{i-1} + eta_i PsiHat(v_{i-1}, xi2_i),
/// with PsiHat(v, x) = d1 That_x(w_t,l)^T d1 G(Tbar_t,l)^T v + y.
/// `qhat` only scales the divergence guard ||v|| <= 1e6 ||y|| / (1 - qhat).
inline Vec stochastic_linear_solve(const StochasticMapSelection& that, const MapSelection& g,
                                   const Vec& w_t, const Vec& lambda, const Vec& tbar_t,
                                   const Vec& y, const StepSchedule& sched,
                                   const std::vector<SampleToken>& xi2, int k, double qhat = 0.0) {
    if (k < 0) throw std::invalid_argument("stochastic_linear_solve: k must be >= 0");
    if (static_cast<int>(xi2.size()) < k)
        throw std::invalid_argument("stochastic_linear_solve: stream shorter than k");
    const double guard = 1e6 * norm2(y) / (1.0 - std::min(qhat, 1.0 - 1e-12));
    Vec v(static_cast<std::size_t>(that.state_dim), 0.0);
    for (int i = 1; i <= k; ++i) {
        const Vec g1 = g.vjp_state(tbar_t, lambda, v);
        Vec psi = that.vjp_state(w_t, lambda, g1, xi2[static_cast<std::size_t>(i - 1)]);
        axpy(1.0, y, psi);
        const double eta = sched.eta(i);
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = (1.0 - eta) * v[j] + eta * psi[j];
        if (!all_finite(v) || norm2(v) > guard)
            throw std::runtime_error("linear-solve divergence at i=" + std::to_string(i) +
                                     ", eta=" + std::to_string(eta));
    }
    return v;
}

/// NSID: (1) Tbar_t = mean of That over xi1; (2) v_k from the stochastic
/// linear solve on xi2; (3) output the transposed product
///   mean_{xi1} d2 That^T (d1 G(Tbar_t,l)^T v_k) + d2 G(Tbar_t,l)^T v_k,
/// reusing the same xi1 stream for Tbar and the d2 terms.
inline DerivEstimate nsid(const StochasticMapSelection& that, const MapSelection& g, const Vec& w_t,
                          const Vec& lambda, const Vec& y, int k, int J, const StepSchedule& sched,
                          const SampleStreams& streams, double qhat = 0.0) {
    if (k < 1 || J < 1) throw std::invalid_argument("nsid: k and J must be >= 1");
    if (static_cast<int>(streams.xi1.size()) < J)
        throw std::invalid_argument("nsid: xi1 stream shorter than J");
    Vec tbar(static_cast<std::size_t>(that.state_dim), 0.0);
    for (int j = 0; j < J; ++j)
        axpy(1.0, that.eval(w_t, lambda, streams.xi1[static_cast<std::size_t>(j)]), tbar);
    for (auto& x : tbar) x /= static_cast<double>(J);

    const Vec vk = stochastic_linear_solve(that, g, w_t, lambda, tbar, y, sched, streams.xi2, k, qhat);

    const Vec g1 = g.vjp_state(tbar, lambda, vk);
    Vec out(static_cast<std::size_t>(that.param_dim), 0.0);
    for (int j = 0; j < J; ++j)
        axpy(1.0, that.vjp_param(w_t, lambda, g1, streams.xi1[static_cast<std::size_t>(j)]), out);
    for (auto& x : out) x /= static_cast<double>(J);
    axpy(1.0, g.vjp_param(tbar, lambda, vk), out);

    DerivEstimate est;
    est.value = std::move(out);
    est.method = Method::Nsid;
    est.k = k;
    est.J = J;
    est.seed = streams.seed;
    return est;
}

/// Wraps a deterministic map as a token-ignoring sampler. Useful for the
/// consistency reductions (zero variance makes NSID collapse onto AID-FP).
inline StochasticMapSelection zero_variance_stochastic(const MapSelection& map) {
    StochasticMapSelection s;
    s.state_dim = map.state_dim;
    s.param_dim = map.param_dim;
    s.full = map;
    s.population = {{0}};
    s.eval = [map](const Vec& u, const Vec& lambda, const SampleToken&) { return map.eval(u, lambda); };
    s.vjp_state = [map](const Vec& u, const Vec& lambda, const Vec& v, const SampleToken&) {
        return map.vjp_state(u, lambda, v);
    };
    s.vjp_param = [map](const Vec& u, const Vec& lambda, const Vec& v, const SampleToken&) {
        return map.vjp_param(u, lambda, v);
    };
    s.jvp = [map](const Vec& u, const Vec& lambda, const Vec& wdot, const Vec& ldot,
                  const SampleToken&) { return map.jvp(u, lambda, wdot, ldot); };
    return s;
}

/// The stochastic map with the outer map folded into each sample:
/// PhiHat_x(u, l) = G(That_x(u, l), l). Biased, since E[G(That)] != G(E[That]).
inline StochasticMapSelection fold_outer_map(const MapSelection& g,
                                             const StochasticMapSelection& that) {
    StochasticMapSelection s;
    s.state_dim = that.state_dim;
    s.param_dim = that.param_dim;
    s.full = compose(g, that.full);
    s.population = that.population;
    s.eval = [g, that](const Vec& u, const Vec& lambda, const SampleToken& tok) {
        return g.eval(that.eval(u, lambda, tok), lambda);
    };
    s.vjp_state = [g, that](const Vec& u, const Vec& lambda, const Vec& v, const SampleToken& tok) {
        const Vec tu = that.eval(u, lambda, tok);
        return that.vjp_state(u, lambda, g.vjp_state(tu, lambda, v), tok);
    };
    s.vjp_param = [g, that](const Vec& u, const Vec& lambda, const Vec& v, const SampleToken& tok) {
        const Vec tu = that.eval(u, lambda, tok);
        const Vec gv = g.vjp_state(tu, lambda, v);
        Vec out = that.vjp_param(u, lambda, gv, tok);
        axpy(1.0, g.vjp_param(tu, lambda, v), out);
        return out;
    };
    s.jvp = [g, that](const Vec& u, const Vec& lambda, const Vec& wdot, const Vec& ldot,
                      const SampleToken& tok) {
        const Vec tu = that.eval(u, lambda, tok);
        return g.jvp(tu, lambda, that.jvp(u, lambda, wdot, ldot, tok), ldot);
    };
    return s;
}

/// SID baseline: NSID with the identity outer map and the folded sampler
/// PhiHat_x = G(That_x(.), .). Documented as biased; its theoretical
/// guarantees do not hold.
inline DerivEstimate sid_baseline(const StochasticMapSelection& that, const MapSelection& g,
                                  const Vec& w_t, const Vec& lambda, const Vec& y, int k, int J,
                                  const StepSchedule& sched, const SampleStreams& streams,
                                  double qhat = 0.0) {
    const StochasticMapSelection folded = fold_outer_map(g, that);
    DerivEstimate est = nsid(folded, identity_map(that.state_dim, that.param_dim), w_t, lambda, y,
                             k, J, sched, streams, qhat);
    est.method = Method::Sid;
    return est;
}

}  // namespace fixdiff
