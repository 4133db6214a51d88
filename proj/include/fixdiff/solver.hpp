#pragma once

// Deterministic fixed-point solving, the Appendix-F style step-size and
// contraction constants, trajectory recording, and support-identification
// detection.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"

namespace fixdiff {

struct Trajectory {
    std::vector<Vec> iterates;      // w_0..w_t when recorded, else empty
    Vec last;                       // w_t
    std::vector<double> residuals;  // ||w_{i+1} - w_i||, length t
    Vec lambda;
    std::string map_id;
    bool recorded = false;

    int t() const { return static_cast<int>(residuals.size()); }
    const Vec& iterate(int i) const {
        if (!recorded) throw std::runtime_error("ITD requires full trajectory");
        return iterates[static_cast<std::size_t>(i)];
    }
};

/// Iterates w_i = Phi(w_{i-1}, lambda) for t steps. With record=false only
/// w_t and the residuals are kept (AID mode, O(1) memory).
inline Trajectory fixed_point_solve(const MapSelection& map, const Vec& lambda, const Vec& w0,
                                    int t, bool record = true, std::string map_id = {}) {
    if (t < 0) throw std::invalid_argument("fixed_point_solve: t must be >= 0");
    Trajectory traj;
    traj.lambda = lambda;
    traj.map_id = std::move(map_id);
    traj.recorded = record;
    traj.residuals.reserve(static_cast<std::size_t>(t));
    Vec w = w0;
    if (record) traj.iterates.push_back(w);
    for (int i = 1; i <= t; ++i) {
        Vec next = map.eval(w, lambda);
        if (!all_finite(next))
            throw std::runtime_error("divergence at iteration " + std::to_string(i));
        traj.residuals.push_back(norm2(next - w));
        w = std::move(next);
        if (record) traj.iterates.push_back(w);
    }
    traj.last = std::move(w);
    return traj;
}

/// Appendix-F constants from precomputed Gram eigenvalues:
///   eta = 2 / (c (L + mu) + 2 lambda_2),
///   q = max{ |1 - eta (c L + lambda_2)|, |1 - eta (c mu + lambda_2)| }.
inline std::pair<double, double> ista_step_size_from_eigs(double big, double small, double lambda2,
                                                          double c) {
    if (c <= 0.0 || lambda2 < 0.0) throw std::invalid_argument("ista_step_size: bad constants");
    const double denom = c * (big + small) + 2.0 * lambda2;
    if (denom <= 0.0) throw std::runtime_error("ista_step_size: degenerate denominator");
    const double eta = 2.0 / denom;
    const double q = std::max(std::abs(1.0 - eta * (c * big + lambda2)),
                              std::abs(1.0 - eta * (c * small + lambda2)));
    return {eta, q};
}

/// Same, with (L, mu) computed from n^{-1} X^T X by power iteration.
inline std::pair<double, double> ista_step_size(const Mat& x, double lambda2, double c) {
    const auto [big, small] = extreme_eigs_gram(x);
    return ista_step_size_from_eigs(big, small, lambda2, c);
}

/// Probe-based estimate of the contraction constant: the largest realized
/// operator norm of d1 Phi over random probe points, each sharpened by a few
/// power-iteration steps on d1Phi^T d1Phi. A heuristic stand-in when no
/// closed form exists; it approaches the true local norm from below.
inline double estimate_q(const MapSelection& map, const Vec& lambda, int probes, Rng& rng) {
    if (probes < 1) throw std::invalid_argument("estimate_q: probes must be >= 1");
    const Vec zero_ldot(static_cast<std::size_t>(map.param_dim), 0.0);
    double qhat = 0.0;
    for (int p = 0; p < probes; ++p) {
        for (int side = 0; side < 2; ++side) {
            const Vec point = gaussian(rng, map.state_dim);
            Vec v = gaussian(rng, map.state_dim);
            const double nv = norm2(v);
            if (nv == 0.0) continue;
            for (auto& x : v) x /= nv;
            double sigma = 0.0;
            for (int it = 0; it < 12; ++it) {
                const Vec s = map.jvp(point, lambda, v, zero_ldot);
                sigma = norm2(s);
                if (sigma == 0.0) break;
                Vec w = map.vjp_state(point, lambda, s);
                const double nw = norm2(w);
                if (nw == 0.0) break;
                for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
            }
            qhat = std::max(qhat, sigma);
        }
    }
    return qhat;
}

namespace detail {

inline std::vector<bool> support_pattern(const Vec& w, double zero_tol) {
    std::vector<bool> pat(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) pat[i] = std::abs(w[i]) > zero_tol;
    return pat;
}

}  // namespace detail

/// Smallest i such that the zero/nonzero pattern of w_i matches w_ref's and
/// stays matched for all later recorded iterates; nullopt if never.
inline std::optional<int> support_identification(const Trajectory& traj, const Vec& w_ref,
                                                 double zero_tol = 1e-12) {
    if (!traj.recorded) throw std::runtime_error("support_identification requires full trajectory");
    const auto ref = detail::support_pattern(w_ref, zero_tol);
    int tau = -1;
    for (int i = static_cast<int>(traj.iterates.size()) - 1; i >= 0; --i) {
        if (detail::support_pattern(traj.iterates[static_cast<std::size_t>(i)], zero_tol) != ref) break;
        tau = i;
    }
    if (tau < 0) return std::nullopt;
    return tau;
}

}  // namespace fixdiff
