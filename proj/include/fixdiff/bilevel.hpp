#pragma once

// Hypergradient assembly for the bilevel problem min_l E(w(l), l) subject to
// w(l) = Phi(w(l), l): BITD, BAID-FP, NSID-Bilevel, and a plain projected
// descent outer loop (plumbing only; no stationarity rate is claimed).

#include <functional>
#include <stdexcept>
#include <vector>

#include "fixdiff/deriv_det.hpp"
#include "fixdiff/deriv_stoch.hpp"
#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"
#include "fixdiff/solver.hpp"

namespace fixdiff {

/// Upper-level loss with one fixed selection of its derivative, exposed as
/// the two gradient blocks d1 E(w,l)^T in R^d and d2 E(w,l)^T in R^m.
struct UpperLevel {
    int state_dim = 0;
    int param_dim = 0;
    std::function<double(const Vec&, const Vec&)> eval;
    std::function<Vec(const Vec&, const Vec&)> grad_state;
    std::function<Vec(const Vec&, const Vec&)> grad_param;
};

/// Minibatch access to the upper level; tokens index validation rows.
struct StochasticUpperLevel {
    UpperLevel full;
    std::function<double(const Vec&, const Vec&, const SampleToken&)> eval;
    std::function<Vec(const Vec&, const Vec&, const SampleToken&)> grad_state;
    std::function<Vec(const Vec&, const Vec&, const SampleToken&)> grad_param;
    std::int64_t population = 0;
};

/// BITD: itd_vjp with y = d1 E(w_t, l)^T, plus d2 E(w_t, l)^T.
inline Vec bitd_hypergrad(const UpperLevel& e, const MapSelection& map, const Trajectory& traj,
                          const Vec& lambda) {
    const Vec y = e.grad_state(traj.last, lambda);
    Vec out = itd_vjp(map, traj, lambda, y).value;
    axpy(1.0, e.grad_param(traj.last, lambda), out);
    return out;
}

/// BAID-FP: aid_fp_vjp with y = d1 E(w_t, l)^T, plus d2 E(w_t, l)^T.
inline Vec baid_fp_hypergrad(const UpperLevel& e, const MapSelection& map, const Vec& w_t,
                             const Vec& lambda, int k) {
    const Vec y = e.grad_state(w_t, lambda);
    Vec out = aid_fp_vjp(map, w_t, lambda, y, k).value;
    axpy(1.0, e.grad_param(w_t, lambda), out);
    return out;
}

/// NSID-Bilevel: Ebar' over J1 zeta tokens, y = d1 Ebar^T, r = NSID(k, J2),
/// returns r + d2 Ebar^T.
inline Vec nsid_bilevel(const StochasticUpperLevel& e, const StochasticMapSelection& that,
                        const MapSelection& g, const Vec& w_t, const Vec& lambda, int k, int J1,
                        int J2, const StepSchedule& sched, const SampleStreams& streams,
                        const std::vector<SampleToken>& zeta, double qhat = 0.0) {
    if (J1 < 1 || static_cast<int>(zeta.size()) < J1)
        throw std::invalid_argument("nsid_bilevel: zeta stream shorter than J1");
    Vec y(static_cast<std::size_t>(that.state_dim), 0.0);
    Vec gpar(static_cast<std::size_t>(that.param_dim), 0.0);
    for (int j = 0; j < J1; ++j) {
        const auto& tok = zeta[static_cast<std::size_t>(j)];
        axpy(1.0, e.grad_state(w_t, lambda, tok), y);
        axpy(1.0, e.grad_param(w_t, lambda, tok), gpar);
    }
    for (auto& v : y) v /= static_cast<double>(J1);
    for (auto& v : gpar) v /= static_cast<double>(J1);

    Vec out = nsid(that, g, w_t, lambda, y, k, J2, sched, streams, qhat).value;
    axpy(1.0, gpar, out);
    return out;
}

/// Projected descent l_{s+1} = Proj(l_s - alpha g(l_s)), recording the
/// (lambda, objective) trace. Plumbing only: no convergence rate holds in
/// the nonsmooth setting.
inline std::vector<std::pair<Vec, double>> outer_loop(
    Vec lambda0, const std::function<Vec(const Vec&)>& hypergrad,
    const std::function<double(const Vec&)>& objective,
    const std::function<Vec(const Vec&)>& project, int steps, double step_size) {
    if (steps < 0) throw std::invalid_argument("outer_loop: steps must be >= 0");
    std::vector<std::pair<Vec, double>> trace;
    trace.reserve(static_cast<std::size_t>(steps) + 1);
    Vec lambda = project(std::move(lambda0));
    trace.emplace_back(lambda, objective(lambda));
    for (int s = 0; s < steps; ++s) {
        const Vec grad = hypergrad(lambda);
        axpy(-step_size, grad, lambda);
        lambda = project(lambda);
        if (!all_finite(lambda))
            throw std::runtime_error("outer_loop: non-finite lambda at step " + std::to_string(s));
        trace.emplace_back(lambda, objective(lambda));
    }
    return trace;
}

}  // namespace fixdiff
