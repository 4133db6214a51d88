#pragma once

// Ground-truth machinery: the dense implicit-Jacobian oracle, the long-run
// AID-FP reference protocol, central finite differences, and exact bound
// certification on hand-built piecewise-linear maps (where the pieces are
// affine, so the smoothness constant vanishes and the rate bounds close).

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fixdiff/deriv_det.hpp"
#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"
#include "fixdiff/solver.hpp"

namespace fixdiff {

/// Rate constants observed at a reference solution.
struct RateConstants {
    double q = 0.0;
    double kappa = 0.0;         // 1/(1-q)
    double b_hat = 0.0;         // sup-norm estimate of d2 Phi at the reference
    std::optional<double> smoothness;  // L; 0 for piecewise-linear instances, else unknown
    std::optional<int> tau;     // support-identification index
};

/// Iteration count for the reference protocol: ceil(log(target)/log(1/q)),
/// capped at 1e5.
inline int reference_iters(double qhat, double target = 1e10) {
    if (qhat <= 0.0) return 1;
    if (qhat >= 1.0) return 100000;
    const double it = std::ceil(std::log(target) / std::log(1.0 / qhat));
    return static_cast<int>(std::min(it, 1e5));
}

namespace detail {

inline Mat materialize_state_jacobian(const MapSelection& map, const Vec& w, const Vec& lambda) {
    const int d = map.state_dim;
    const Vec zero_ldot(static_cast<std::size_t>(map.param_dim), 0.0);
    Mat a1(d, d);
    Vec e(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
        e[static_cast<std::size_t>(j)] = 1.0;
        const Vec col = map.jvp(w, lambda, e, zero_ldot);
        for (int i = 0; i < d; ++i) a1(i, j) = col[static_cast<std::size_t>(i)];
        e[static_cast<std::size_t>(j)] = 0.0;
    }
    return a1;
}

inline Mat materialize_param_jacobian(const MapSelection& map, const Vec& w, const Vec& lambda) {
    const int d = map.state_dim, m = map.param_dim;
    const Vec zero_wdot(static_cast<std::size_t>(d), 0.0);
    Mat a2(d, m);
    Vec e(static_cast<std::size_t>(m), 0.0);
    for (int j = 0; j < m; ++j) {
        e[static_cast<std::size_t>(j)] = 1.0;
        const Vec col = map.jvp(w, lambda, zero_wdot, e);
        for (int i = 0; i < d; ++i) a2(i, j) = col[static_cast<std::size_t>(i)];
        e[static_cast<std::size_t>(j)] = 0.0;
    }
    return a2;
}

}  // namespace detail

/// Dense implicit Jacobian (I - A1)^{-1} A2 at the reference iterate, with
/// A1 = d1 Phi and A2 = d2 Phi materialized column-by-column via JVPs.
/// Guarded to d, m <= 200.
inline Mat implicit_jacobian_oracle(const MapSelection& map, const Vec& lambda, int t_ref,
                                    const Vec& w0) {
    const int d = map.state_dim, m = map.param_dim;
    if (d > 200 || m > 200) throw std::invalid_argument("implicit_jacobian_oracle: size guard");
    const Trajectory traj = fixed_point_solve(map, lambda, w0, t_ref, /*record=*/false);
    const Mat a1 = detail::materialize_state_jacobian(map, traj.last, lambda);
    const Mat a2 = detail::materialize_param_jacobian(map, traj.last, lambda);
    Mat system(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) system(i, j) = (i == j ? 1.0 : 0.0) - a1(i, j);
    Mat w(d, m);
    for (int j = 0; j < m; ++j) {
        Vec rhs(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) rhs[static_cast<std::size_t>(i)] = a2(i, j);
        const Vec col = solve_dense(system, rhs);
        for (int i = 0; i < d; ++i) w(i, j) = col[static_cast<std::size_t>(i)];
    }
    return w;
}

inline Mat implicit_jacobian_oracle(const MapSelection& map, const Vec& lambda, int t_ref) {
    return implicit_jacobian_oracle(map, lambda, t_ref,
                                    Vec(static_cast<std::size_t>(map.state_dim), 0.0));
}

/// The long-run reference: solve from w_0 = 0 for t_ref iterations, then
/// AID-FP with k_ref. All experiment errors are distances to this value.
inline DerivEstimate reference_vjp(const MapSelection& map, const Vec& lambda, const Vec& y,
                                   int t_ref, int k_ref) {
    const Vec w0(static_cast<std::size_t>(map.state_dim), 0.0);
    const Trajectory traj = fixed_point_solve(map, lambda, w0, t_ref, /*record=*/false);
    DerivEstimate est = aid_fp_vjp(map, traj.last, lambda, y, k_ref);
    est.t = t_ref;
    return est;
}

/// Central finite differences of a scalar function of lambda. Valid only at
/// generic points where the composition is differentiable; the caller keeps
/// probes away from kinks.
inline Vec finite_diff_hypergrad(const std::function<double(const Vec&)>& f, const Vec& lambda,
                                 double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_hypergrad: h must be positive");
    Vec g(lambda.size());
    Vec probe = lambda;
    for (std::size_t j = 0; j < lambda.size(); ++j) {
        probe[j] = lambda[j] + h;
        const double fp = f(probe);
        probe[j] = lambda[j] - h;
        const double fm = f(probe);
        probe[j] = lambda[j];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_hypergrad: non-finite evaluation");
        g[j] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// --------------------------------------------------------------------------
// Piecewise-linear bound certification
// --------------------------------------------------------------------------

/// A hand-built piecewise-linear instance with enumerable pieces, carrying
/// the constants the rate bounds need: the contraction constant q, the
/// piece-separation constant M and the kink radius R at the fixed point.
struct PwlInstance {
    MapSelection map;
    Vec lambda;
    Vec w0;
    Vec y;
    double q = 0.0;
    double piece_gap = 0.0;    // M
    double kink_radius = 0.0;  // R
    std::string name;
};

struct PwlCertRow {
    int index = 0;  // k for the AID rows, t for the ITD rows
    double error = 0.0;
    double bound = 0.0;
    bool pass = false;
};

struct PwlCertReport {
    bool applicable = false;
    int tau = 0;
    RateConstants constants;
    double delta0 = 0.0;
    std::vector<PwlCertRow> aid;
    std::vector<PwlCertRow> itd;

    bool all_pass() const {
        if (!applicable) return false;
        for (const auto& r : aid)
            if (!r.pass) return false;
        for (const auto& r : itd)
            if (!r.pass) return false;
        return true;
    }
};

/// Checks, after support identification (delta = 0, L = 0), that the AID-FP
/// error meets B q^k/(1-q) for k = 1..k_max, and that the ITD error respects
/// the rate bound with delta-bar(t) = min(tau,t)/t:
///   B/(1-q) q^t + (B+1)/(1-q) (M/R) min(tau,t)/t * Delta_0 t q^{t-1}.
inline PwlCertReport certify_pwl_bound(const PwlInstance& inst, int t, int k_max,
                                       double tol = 1e-9) {
    PwlCertReport rep;
    const MapSelection& map = inst.map;
    const double q = inst.q;
    rep.constants.q = q;
    rep.constants.kappa = 1.0 / (1.0 - q);
    rep.constants.smoothness = 0.0;

    const int ref_t = reference_iters(q, 1e14);
    const Trajectory ref_traj = fixed_point_solve(map, inst.lambda, inst.w0, ref_t, false);
    const Vec& w_star = ref_traj.last;
    const DerivEstimate ref = aid_fp_vjp(map, w_star, inst.lambda, inst.y, ref_t);

    const Mat a2 = detail::materialize_param_jacobian(map, w_star, inst.lambda);
    rep.constants.b_hat = spectral_norm(a2);

    const Trajectory traj = fixed_point_solve(map, inst.lambda, inst.w0, t, /*record=*/true);
    rep.delta0 = norm2(inst.w0 - w_star);

    // tau: first iterate within the kink radius of the fixed point.
    int tau = -1;
    for (int i = 0; i <= traj.t(); ++i) {
        if (norm2(traj.iterate(i) - w_star) <= inst.kink_radius) {
            tau = i;
            break;
        }
    }
    if (tau < 0 || tau > t) return rep;  // not applicable
    rep.applicable = true;
    rep.tau = tau;
    rep.constants.tau = tau;

    const double b = rep.constants.b_hat;
    const double kappa = rep.constants.kappa;
    for (int k = 1; k <= k_max; ++k) {
        const DerivEstimate est = aid_fp_vjp(map, traj.last, inst.lambda, inst.y, k);
        PwlCertRow row;
        row.index = k;
        row.error = estimate_error(est, ref);
        row.bound = b * std::pow(q, k) * kappa;
        row.pass = row.error <= row.bound + tol;
        rep.aid.push_back(row);
    }
    const double mr = inst.kink_radius > 0.0 ? inst.piece_gap / inst.kink_radius : 0.0;
    for (int ti = 1; ti <= t; ++ti) {
        Trajectory prefix;
        prefix.recorded = true;
        prefix.lambda = inst.lambda;
        prefix.iterates.assign(traj.iterates.begin(), traj.iterates.begin() + ti + 1);
        prefix.residuals.assign(traj.residuals.begin(), traj.residuals.begin() + ti);
        prefix.last = prefix.iterates.back();
        const DerivEstimate est = itd_vjp(map, prefix, inst.lambda, inst.y);
        PwlCertRow row;
        row.index = ti;
        row.error = estimate_error(est, ref);
        const double delta_bar = static_cast<double>(std::min(tau, ti)) / static_cast<double>(ti);
        row.bound = b * kappa * std::pow(q, ti) +
                    (b + 1.0) * kappa * mr * delta_bar * rep.delta0 *
                        static_cast<double>(ti) * std::pow(q, ti - 1);
        row.pass = row.error <= row.bound + tol;
        rep.itd.push_back(row);
    }
    return rep;
}

// --------------------------------------------------------------------------
// Hand-built PWL instances
// --------------------------------------------------------------------------

namespace detail {

/// Phi(w, l) = q relu(w) + C l, with the dead-zone selection at the kink.
/// Pieces are indexed by the relu activity pattern, all affine, so L = 0;
/// the piece-separation constant at an all-positive fixed point is q and the
/// kink radius is min_i w_i(lambda).
inline MapSelection relu_affine_map(double q, const Mat& c) {
    MapSelection m;
    m.state_dim = c.rows;
    m.param_dim = c.cols;
    m.contraction_bound = q;
    m.eval = [q, c](const Vec& u, const Vec& lambda) {
        Vec r = matvec(c, lambda);
        for (std::size_t i = 0; i < u.size(); ++i)
            if (u[i] > 0.0) r[i] += q * u[i];
        return r;
    };
    m.vjp_state = [q](const Vec& u, const Vec&, const Vec& v) {
        Vec r(u.size(), 0.0);
        for (std::size_t i = 0; i < u.size(); ++i)
            if (u[i] > 0.0) r[i] = q * v[i];
        return r;
    };
    m.vjp_param = [c](const Vec&, const Vec&, const Vec& v) { return matvec_t(c, v); };
    m.jvp = [q, c](const Vec& u, const Vec&, const Vec& wdot, const Vec& ldot) {
        Vec r = matvec(c, ldot);
        for (std::size_t i = 0; i < u.size(); ++i)
            if (u[i] > 0.0) r[i] += q * wdot[i];
        return r;
    };
    return m;
}

}  // namespace detail

/// Scalar single-piece instance Phi = q w + lambda: tau = 0 and the AID-FP
/// error equals the bound exactly.
inline PwlInstance pwl_scalar_instance(double q = 0.5) {
    PwlInstance inst;
    Mat a1(1, 1);
    a1(0, 0) = q;
    Mat a2(1, 1);
    a2(0, 0) = 1.0;
    inst.map = affine_map(a1, a2, Vec{0.0});
    inst.lambda = Vec{1.0};
    inst.w0 = Vec{0.0};
    inst.y = Vec{1.0};
    inst.q = q;
    inst.piece_gap = 0.0;
    inst.kink_radius = std::numeric_limits<double>::infinity();
    inst.name = "scalar-affine";
    return inst;
}

/// Scalar relu instance Phi = q relu(w) + lambda at lambda = 1: the active
/// piece is linear after the first crossing.
inline PwlInstance pwl_scalar_relu_instance(double q = 0.5) {
    PwlInstance inst;
    Mat c(1, 1);
    c(0, 0) = 1.0;
    inst.map = detail::relu_affine_map(q, c);
    inst.lambda = Vec{1.0};
    inst.w0 = Vec{-10.0};
    inst.y = Vec{1.0};
    inst.q = q;
    inst.piece_gap = q;                        // nearest other piece differs by q in the relu block
    inst.kink_radius = 1.0 / (1.0 - q);        // w(lambda) = lambda/(1-q), scalar
    inst.name = "scalar-relu";
    return inst;
}

/// Five-dimensional relu instance Phi = q relu(w) + C lambda with
/// C = B u z^T for unit u > 0 and unit z, probed with y = u so the AID-FP
/// error meets the bound with equality after support identification.
inline PwlInstance pwl_5dim_instance(double q = 0.6, double b_scale = 2.0) {
    const int d = 5, m = 3;
    Vec u{3.0, 1.0, 2.0, 5.0, 4.0};
    const double nu = norm2(u);
    for (auto& x : u) x /= nu;
    Vec z{2.0, -1.0, 2.0};
    const double nz = norm2(z);
    for (auto& x : z) x /= nz;
    Mat c(d, m);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < m; ++j)
            c(i, j) = b_scale * u[static_cast<std::size_t>(i)] * z[static_cast<std::size_t>(j)];
    PwlInstance inst;
    inst.map = detail::relu_affine_map(q, c);
    inst.lambda = Vec{1.0, 0.5, 1.5};  // z . lambda > 0, so w(lambda) > 0 componentwise
    inst.w0 = Vec(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) inst.w0[static_cast<std::size_t>(i)] = -20.0 * u[static_cast<std::size_t>(i)];
    inst.y = u;
    inst.q = q;
    inst.piece_gap = q;
    const double zl = dot(z, inst.lambda);
    double wmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < d; ++i)
        wmin = std::min(wmin, b_scale * zl * u[static_cast<std::size_t>(i)] / (1.0 - q));
    inst.kink_radius = wmin;
    inst.name = "relu-5d";
    return inst;
}

}  // namespace fixdiff
