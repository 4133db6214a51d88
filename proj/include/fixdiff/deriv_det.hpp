#pragma once

// Deterministic derivative estimators: iterative differentiation in reverse
// and forward mode, AID by fixed-point iteration on the implicit linear
// system, AID by conjugate gradient, and the per-estimate error metric.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"
#include "fixdiff/solver.hpp"

namespace fixdiff {

enum class Method { ItdReverse, ItdForward, AidFp, AidCg, Nsid, Sid };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::ItdReverse: return "ITD-R";
        case Method::ItdForward: return "ITD-F";
        case Method::AidFp: return "AID-FP";
        case Method::AidCg: return "AID-CG";
        case Method::Nsid: return "NSID";
        case Method::Sid: return "SID";
    }
    return "?";
}

/// A vector approximating an element of D_w(lambda)^T y (VJP mode, R^m) or
/// D_w(lambda) x (JVP mode, R^d), tagged with method/iteration/seed metadata.
struct DerivEstimate {
    Vec value;
    Method method = Method::AidFp;
    int t = 0;
    int k = 0;
    int J = 0;
    std::optional<std::uint64_t> seed;
    double wall_ms = 0.0;
};

/// Reverse sweep over the recorded trajectory:
///   alpha <- y; g <- 0;
///   for i = t-1 .. 0: g += vjp_param(w_i, lambda, alpha); alpha <- vjp_state(w_i, lambda, alpha).
inline DerivEstimate itd_vjp(const MapSelection& map, const Trajectory& traj, const Vec& lambda,
                             const Vec& y) {
    if (!traj.recorded) throw std::runtime_error("ITD requires full trajectory");
    Vec alpha = y;
    Vec g(static_cast<std::size_t>(map.param_dim), 0.0);
    for (int i = traj.t() - 1; i >= 0; --i) {
        const Vec& wi = traj.iterate(i);
        axpy(1.0, map.vjp_param(wi, lambda, alpha), g);
        alpha = map.vjp_state(wi, lambda, alpha);
    }
    DerivEstimate est;
    est.value = std::move(g);
    est.method = Method::ItdReverse;
    est.t = traj.t();
    return est;
}

/// Forward sweep: wdot <- 0; for i = 0 .. t-1: wdot <- jvp(w_i, lambda, wdot, ldot).
inline DerivEstimate itd_jvp(const MapSelection& map, const Trajectory& traj, const Vec& lambda,
                             const Vec& lambdadot) {
    if (!traj.recorded) throw std::runtime_error("ITD requires full trajectory");
    Vec wdot(static_cast<std::size_t>(map.state_dim), 0.0);
    for (int i = 0; i < traj.t(); ++i) wdot = map.jvp(traj.iterate(i), lambda, wdot, lambdadot);
    DerivEstimate est;
    est.value = std::move(wdot);
    est.method = Method::ItdForward;
    est.t = traj.t();
    return est;
}

/// Transposed fixed-point recursion at the single point w_t:
///   v <- 0; k times: v <- vjp_state(w_t, lambda, v) + y; return vjp_param(w_t, lambda, v).
inline DerivEstimate aid_fp_vjp(const MapSelection& map, const Vec& w_t, const Vec& lambda,
                                const Vec& y, int k) {
    if (k < 0) throw std::invalid_argument("aid_fp_vjp: k must be >= 0");
    Vec v(static_cast<std::size_t>(map.state_dim), 0.0);
    for (int i = 0; i < k; ++i) {
        v = map.vjp_state(w_t, lambda, v);
        axpy(1.0, y, v);
    }
    DerivEstimate est;
    est.value = k == 0 ? Vec(static_cast<std::size_t>(map.param_dim), 0.0)
                       : map.vjp_param(w_t, lambda, v);
    est.method = Method::AidFp;
    est.k = k;
    return est;
}

enum class CgMode { DirectCg, NormalEq };

/// Solves (I - d1Phi(w_t, lambda)^T) v = y by conjugate gradient, either
/// directly (caller asserts d1Phi^T symmetric) or on the normal equations
/// (default; handles the nonsymmetric d1Phi arising from prox-grad
/// composition), then returns vjp_param(w_t, lambda, v).
inline DerivEstimate aid_cg_vjp(const MapSelection& map, const Vec& w_t, const Vec& lambda,
                                const Vec& y, int k, CgMode mode = CgMode::NormalEq) {
    if (k < 1) throw std::invalid_argument("aid_cg_vjp: k must be >= 1");
    const Vec zero_ldot(static_cast<std::size_t>(map.param_dim), 0.0);
    auto apply_a = [&](const Vec& v) {  // (I - d1Phi^T) v
        Vec r = map.vjp_state(w_t, lambda, v);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = v[i] - r[i];
        return r;
    };
    auto apply_at = [&](const Vec& v) {  // (I - d1Phi) v
        Vec r = map.jvp(w_t, lambda, v, zero_ldot);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = v[i] - r[i];
        return r;
    };
    const bool normal = mode == CgMode::NormalEq;
    auto op = [&](const Vec& v) { return normal ? apply_at(apply_a(v)) : apply_a(v); };
    const Vec rhs = normal ? apply_at(y) : y;

    Vec v(static_cast<std::size_t>(map.state_dim), 0.0);
    Vec r = rhs;
    Vec p = r;
    double rr = dot(r, r);
    const double tiny = 1e-28 * std::max(1.0, dot(rhs, rhs));
    for (int i = 0; i < k && rr > tiny; ++i) {
        const Vec ap = op(p);
        const double pap = dot(p, ap);
        if (!(pap > 0.0))
            throw std::runtime_error("CG breakdown at iteration " + std::to_string(i));
        const double alpha = rr / pap;
        axpy(alpha, p, v);
        axpy(-alpha, ap, r);
        if (!all_finite(v)) throw std::runtime_error("non-finite CG iterate at iteration " + std::to_string(i));
        const double rr_next = dot(r, r);
        const double beta = rr_next / rr;
        rr = rr_next;
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = r[j] + beta * p[j];
    }
    DerivEstimate est;
    est.value = map.vjp_param(w_t, lambda, v);
    est.method = Method::AidCg;
    est.k = k;
    return est;
}

/// Euclidean distance to a reference estimate. With the reference produced
/// by the long-run AID-FP protocol this upper-bounds (up to reference
/// accuracy) the excess to the implicit derivative product.
inline double estimate_error(const DerivEstimate& est, const DerivEstimate& ref) {
    if (est.value.size() != ref.value.size())
        throw std::invalid_argument("estimate_error: dimension mismatch");
    return norm2(est.value - ref.value);
}

}  // namespace fixdiff
