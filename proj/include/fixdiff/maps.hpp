#pragma once

// The map abstraction: evaluation plus one fixed selection of a conservative
// derivative, exposed only through VJP/JVP contracts. Concrete building
// blocks: soft-thresholding, gradient steps for the quadratic and
// multinomial-logistic objectives, composition G(T(.)), and weighted sums.
// All VJPs are hand-derived; the adjoint identity
//   <v, jvp(u,l,wdot,ldot)> = <vjp_state(u,l,v), wdot> + <vjp_param(u,l,v), ldot>
// holds exactly for every map built here.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fixdiff/linalg.hpp"

namespace fixdiff {

/// A sample token: an index set into the rows of a finite data population.
using SampleToken = std::vector<std::int64_t>;

struct MapSelection {
    int state_dim = 0;
    int param_dim = 0;
    std::function<Vec(const Vec&, const Vec&)> eval;
    /// d1 Phi(u,l)^T v, in R^d
    std::function<Vec(const Vec&, const Vec&, const Vec&)> vjp_state;
    /// d2 Phi(u,l)^T v, in R^m
    std::function<Vec(const Vec&, const Vec&, const Vec&)> vjp_param;
    /// d1 Phi(u,l) wdot + d2 Phi(u,l) ldot, in R^d
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&)> jvp;
    /// Contraction constant q < 1 when known in closed form.
    std::optional<double> contraction_bound;
};

/// A map accessed through unbiased samples. Tokens are drawn by the caller;
/// `full` is the population-mean map. `population`, when nonempty, enumerates
/// tokens whose average reproduces `full` exactly (used by tests).
struct StochasticMapSelection {
    int state_dim = 0;
    int param_dim = 0;
    MapSelection full;
    std::function<Vec(const Vec&, const Vec&, const SampleToken&)> eval;
    std::function<Vec(const Vec&, const Vec&, const Vec&, const SampleToken&)> vjp_state;
    std::function<Vec(const Vec&, const Vec&, const Vec&, const SampleToken&)> vjp_param;
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&, const SampleToken&)> jvp;
    std::vector<SampleToken> population;

    /// Mean of eval over a list of tokens.
    Vec batch_eval(const Vec& u, const Vec& lambda, const std::vector<SampleToken>& tokens) const {
        Vec acc(static_cast<std::size_t>(state_dim), 0.0);
        for (const auto& tok : tokens) axpy(1.0, eval(u, lambda, tok), acc);
        const double inv = 1.0 / static_cast<double>(tokens.size());
        for (auto& x : acc) x *= inv;
        return acc;
    }
};

// --------------------------------------------------------------------------
// Soft-thresholding
// --------------------------------------------------------------------------

inline Vec soft_threshold(const Vec& u, double theta) {
    if (theta < 0.0) throw std::invalid_argument("soft_threshold: negative threshold");
    Vec r(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double m = std::abs(u[i]) - theta;
        r[i] = m > 0.0 ? (u[i] > 0.0 ? m : -m) : 0.0;
    }
    return r;
}

/// One selected element of the soft-threshold conservative derivative.
/// At a kink |u_i| = theta the dead-zone piece (0) is chosen.
inline std::pair<Vec, double> soft_threshold_selection(const Vec& u, double theta, const Vec& v) {
    Vec dstate(u.size(), 0.0);
    double dtheta = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (std::abs(u[i]) > theta) {
            dstate[i] = v[i];
            dtheta -= (u[i] > 0.0 ? 1.0 : -1.0) * v[i];
        }
    }
    return {std::move(dstate), dtheta};
}

/// Soft-threshold as a MapSelection with threshold
/// theta(lambda) = theta0 + scale * lambda[index] (index omitted: constant).
/// Elastic net uses theta = eta * lambda_1; poisoning uses a fixed theta.
inline MapSelection soft_threshold_map(int state_dim, int param_dim, double theta0,
                                       double scale = 0.0,
                                       std::optional<int> lambda_index = std::nullopt) {
    auto theta_of = [theta0, scale, lambda_index](const Vec& lambda) {
        return theta0 + (lambda_index ? scale * lambda[static_cast<std::size_t>(*lambda_index)] : 0.0);
    };
    MapSelection m;
    m.state_dim = state_dim;
    m.param_dim = param_dim;
    m.eval = [theta_of](const Vec& u, const Vec& lambda) { return soft_threshold(u, theta_of(lambda)); };
    m.vjp_state = [theta_of](const Vec& u, const Vec& lambda, const Vec& v) {
        return soft_threshold_selection(u, theta_of(lambda), v).first;
    };
    m.vjp_param = [theta_of, scale, lambda_index, param_dim](const Vec& u, const Vec& lambda, const Vec& v) {
        Vec g(static_cast<std::size_t>(param_dim), 0.0);
        if (lambda_index) {
            const double dtheta = soft_threshold_selection(u, theta_of(lambda), v).second;
            g[static_cast<std::size_t>(*lambda_index)] = scale * dtheta;
        }
        return g;
    };
    m.jvp = [theta_of, scale, lambda_index](const Vec& u, const Vec& lambda, const Vec& wdot,
                                            const Vec& ldot) {
        const double theta = theta_of(lambda);
        const double thetadot =
            lambda_index ? scale * ldot[static_cast<std::size_t>(*lambda_index)] : 0.0;
        Vec r(u.size(), 0.0);
        for (std::size_t i = 0; i < u.size(); ++i)
            if (std::abs(u[i]) > theta) r[i] = wdot[i] - (u[i] > 0.0 ? 1.0 : -1.0) * thetadot;
        return r;
    };
    return m;
}

// --------------------------------------------------------------------------
// Gradient step for the quadratic (elastic-net) objective
// --------------------------------------------------------------------------

/// T(w, lambda) = w - eta * (2 n^{-1} X^T (X w - y) + lambda_2 w) with
/// lambda = (lambda_1, lambda_2) read live from the parameter vector and the
/// step size eta frozen during differentiation. dT/dlambda_1 = 0,
/// dT/dlambda_2 = -eta w.
inline MapSelection grad_step_quadratic(const Mat& x, const Vec& y, double eta,
                                        std::optional<double> q = std::nullopt) {
    if (eta <= 0.0) throw std::invalid_argument("grad_step_quadratic: eta must be positive");
    const double inv_n = x.rows > 0 ? 1.0 / static_cast<double>(x.rows) : 0.0;
    auto grad = [x, y, inv_n](const Vec& w, double lambda2) {
        Vec r = matvec(x, w);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
        Vec g = matvec_t(x, r);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * inv_n * g[i] + lambda2 * w[i];
        return g;
    };
    MapSelection m;
    m.state_dim = x.cols;
    m.param_dim = 2;
    m.contraction_bound = q;
    m.eval = [grad, eta](const Vec& w, const Vec& lambda) {
        Vec g = grad(w, lambda[1]);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = w[i] - eta * g[i];
        return r;
    };
    m.vjp_state = [x, inv_n, eta](const Vec&, const Vec& lambda, const Vec& v) {
        Vec g = matvec_t(x, matvec(x, v));
        Vec r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            r[i] = v[i] - eta * (2.0 * inv_n * g[i] + lambda[1] * v[i]);
        return r;
    };
    m.vjp_param = [eta](const Vec& w, const Vec&, const Vec& v) {
        return Vec{0.0, -eta * dot(w, v)};
    };
    m.jvp = [x, inv_n, eta](const Vec& w, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        Vec g = matvec_t(x, matvec(x, wdot));
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = wdot[i] - eta * (2.0 * inv_n * g[i] + lambda[1] * wdot[i]) - eta * ldot[1] * w[i];
        return r;
    };
    return m;
}

/// Minibatch variant: one token = an index set B into the rows of X, and
/// That(w, lambda, B) = w - eta * ((2/|B|) X_B^T (X_B w - y_B) + lambda_2 w).
/// Uniform row sampling makes it unbiased; the population is the n
/// singleton batches.
inline StochasticMapSelection grad_step_quadratic_minibatch(const Mat& x, const Vec& y,
                                                            double eta,
                                                            std::optional<double> q = std::nullopt) {
    StochasticMapSelection s;
    s.state_dim = x.cols;
    s.param_dim = 2;
    s.full = grad_step_quadratic(x, y, eta, q);
    auto batch_grad = [x, y](const Vec& w, double lambda2, const SampleToken& tok) {
        Vec g(w.size(), 0.0);
        for (const auto r : tok) {
            const double* row = &x.a[static_cast<std::size_t>(r) * x.cols];
            double resid = -y[static_cast<std::size_t>(r)];
            for (int j = 0; j < x.cols; ++j) resid += row[j] * w[static_cast<std::size_t>(j)];
            for (int j = 0; j < x.cols; ++j) g[static_cast<std::size_t>(j)] += row[j] * resid;
        }
        const double f = 2.0 / static_cast<double>(tok.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = f * g[i] + lambda2 * w[i];
        return g;
    };
    s.eval = [batch_grad, eta](const Vec& w, const Vec& lambda, const SampleToken& tok) {
        Vec g = batch_grad(w, lambda[1], tok);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = w[i] - eta * g[i];
        return r;
    };
    s.vjp_state = [batch_grad, eta, x, y](const Vec&, const Vec& lambda, const Vec& v,
                                          const SampleToken& tok) {
        // Hessian of the batch quadratic applied to v; same kernel with y ignored.
        Vec g(v.size(), 0.0);
        for (const auto r : tok) {
            const double* row = &x.a[static_cast<std::size_t>(r) * x.cols];
            double z = 0.0;
            for (int j = 0; j < x.cols; ++j) z += row[j] * v[static_cast<std::size_t>(j)];
            for (int j = 0; j < x.cols; ++j) g[static_cast<std::size_t>(j)] += row[j] * z;
        }
        const double f = 2.0 / static_cast<double>(tok.size());
        Vec out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = v[i] - eta * (f * g[i] + lambda[1] * v[i]);
        return out;
    };
    s.vjp_param = [eta](const Vec& w, const Vec&, const Vec& v, const SampleToken&) {
        return Vec{0.0, -eta * dot(w, v)};
    };
    s.jvp = [s_vjp = s.vjp_state, eta](const Vec& w, const Vec& lambda, const Vec& wdot,
                                       const Vec& ldot, const SampleToken& tok) {
        Vec r = s_vjp(w, lambda, wdot, tok);  // symmetric state block
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= eta * ldot[1] * w[i];
        return r;
    };
    s.population.reserve(static_cast<std::size_t>(x.rows));
    for (int i = 0; i < x.rows; ++i) s.population.push_back({i});
    return s;
}

// --------------------------------------------------------------------------
// Composition and sums
// --------------------------------------------------------------------------

/// Phi(u, lambda) = G(T(u, lambda), lambda), with the chain-rule selection
///   vjp_state = d1T^T d1G^T v,  vjp_param = d2T^T d1G^T v + d2G^T v.
inline MapSelection compose(const MapSelection& g, const MapSelection& t,
                            std::optional<double> q = std::nullopt) {
    if (g.state_dim != t.state_dim || g.param_dim != t.param_dim)
        throw std::invalid_argument("compose: dimension mismatch");
    MapSelection m;
    m.state_dim = t.state_dim;
    m.param_dim = t.param_dim;
    m.contraction_bound = q ? q : t.contraction_bound;
    m.eval = [g, t](const Vec& u, const Vec& lambda) { return g.eval(t.eval(u, lambda), lambda); };
    m.vjp_state = [g, t](const Vec& u, const Vec& lambda, const Vec& v) {
        const Vec tu = t.eval(u, lambda);
        return t.vjp_state(u, lambda, g.vjp_state(tu, lambda, v));
    };
    m.vjp_param = [g, t](const Vec& u, const Vec& lambda, const Vec& v) {
        const Vec tu = t.eval(u, lambda);
        const Vec gv = g.vjp_state(tu, lambda, v);
        Vec out = t.vjp_param(u, lambda, gv);
        axpy(1.0, g.vjp_param(tu, lambda, v), out);
        return out;
    };
    m.jvp = [g, t](const Vec& u, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        const Vec tu = t.eval(u, lambda);
        return g.jvp(tu, lambda, t.jvp(u, lambda, wdot, ldot), ldot);
    };
    return m;
}

inline MapSelection sum_maps(const std::vector<MapSelection>& maps, const std::vector<double>& weights) {
    if (maps.empty() || maps.size() != weights.size())
        throw std::invalid_argument("sum_maps: bad arguments");
    for (const auto& m : maps)
        if (m.state_dim != maps.front().state_dim || m.param_dim != maps.front().param_dim)
            throw std::invalid_argument("sum_maps: dimension mismatch");
    MapSelection out;
    out.state_dim = maps.front().state_dim;
    out.param_dim = maps.front().param_dim;
    out.eval = [maps, weights](const Vec& u, const Vec& lambda) {
        Vec acc(u.size(), 0.0);
        for (std::size_t i = 0; i < maps.size(); ++i) axpy(weights[i], maps[i].eval(u, lambda), acc);
        return acc;
    };
    out.vjp_state = [maps, weights](const Vec& u, const Vec& lambda, const Vec& v) {
        Vec acc(u.size(), 0.0);
        for (std::size_t i = 0; i < maps.size(); ++i)
            axpy(weights[i], maps[i].vjp_state(u, lambda, v), acc);
        return acc;
    };
    out.vjp_param = [maps, weights, m = out.param_dim](const Vec& u, const Vec& lambda, const Vec& v) {
        Vec acc(static_cast<std::size_t>(m), 0.0);
        for (std::size_t i = 0; i < maps.size(); ++i)
            axpy(weights[i], maps[i].vjp_param(u, lambda, v), acc);
        return acc;
    };
    out.jvp = [maps, weights](const Vec& u, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        Vec acc(u.size(), 0.0);
        for (std::size_t i = 0; i < maps.size(); ++i)
            axpy(weights[i], maps[i].jvp(u, lambda, wdot, ldot), acc);
        return acc;
    };
    return out;
}

/// G(u, lambda) = u. Used by the SID baseline as the trivial outer map.
inline MapSelection identity_map(int state_dim, int param_dim) {
    MapSelection m;
    m.state_dim = state_dim;
    m.param_dim = param_dim;
    m.eval = [](const Vec& u, const Vec&) { return u; };
    m.vjp_state = [](const Vec&, const Vec&, const Vec& v) { return v; };
    m.vjp_param = [param_dim](const Vec&, const Vec&, const Vec&) {
        return Vec(static_cast<std::size_t>(param_dim), 0.0);
    };
    m.jvp = [](const Vec&, const Vec&, const Vec& wdot, const Vec&) { return wdot; };
    m.contraction_bound = std::nullopt;
    return m;
}

/// Phi(w, lambda) = A1 w + A2 lambda + b. Test workhorse; q = ||A1||.
inline MapSelection affine_map(const Mat& a1, const Mat& a2, const Vec& b) {
    MapSelection m;
    m.state_dim = a1.rows;
    m.param_dim = a2.cols;
    m.contraction_bound = spectral_norm(a1);
    m.eval = [a1, a2, b](const Vec& u, const Vec& lambda) {
        Vec r = matvec(a1, u);
        axpy(1.0, matvec(a2, lambda), r);
        axpy(1.0, b, r);
        return r;
    };
    m.vjp_state = [a1](const Vec&, const Vec&, const Vec& v) { return matvec_t(a1, v); };
    m.vjp_param = [a2](const Vec&, const Vec&, const Vec& v) { return matvec_t(a2, v); };
    m.jvp = [a1, a2](const Vec&, const Vec&, const Vec& wdot, const Vec& ldot) {
        Vec r = matvec(a1, wdot);
        axpy(1.0, matvec(a2, ldot), r);
        return r;
    };
    return m;
}

// --------------------------------------------------------------------------
// Multinomial-logistic gradient steps (data poisoning)
// --------------------------------------------------------------------------

namespace detail {

/// Softmax probabilities of z (stabilized in place).
inline Vec softmax(Vec z) {
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double sum = 0.0;
    for (auto& v : z) {
        v = std::exp(v - zmax);
        sum += v;
    }
    for (auto& v : z) v /= sum;
    return z;
}

/// Logits of one example: z_j = sum_i x_i W[i*c... with W flattened row-major p x c.
inline Vec logits(const double* xrow, int p, const Vec& w, int c) {
    Vec z(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < p; ++i) {
        const double xi = xrow[i];
        if (xi == 0.0) continue;
        const double* wrow = &w[static_cast<std::size_t>(i) * c];
        for (int j = 0; j < c; ++j) z[static_cast<std::size_t>(j)] += xi * wrow[j];
    }
    return z;
}

/// H(u) = (diag(p) - p p^T) u for softmax probabilities p.
inline Vec softmax_hvp(const Vec& p, const Vec& u) {
    double pu = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) pu += p[j] * u[j];
    Vec r(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) r[j] = p[j] * (u[j] - pu);
    return r;
}

}  // namespace detail

/// Shared data for the poisoning fixed-point map: clean rows (X, y), rows to
/// corrupt (Xt, yt), and the mixed objective
///   f(Gamma, w) = ce(X w, y)/2 + ce((Xt + Gamma) w, yt)/2 + (lambda2/2)||w||^2
/// with w in R^{p x c} flattened row-major and lambda = vec(Gamma) in
/// R^{n' x p} row-major. The map is T(w, lambda) = w - eta grad_w f.
struct MultinomialObjective {
    Mat x_clean;
    std::vector<int> y_clean;
    Mat x_corr;  // rows to corrupt; may have 0 rows
    std::vector<int> y_corr;
    int n_classes = 0;
    double eta = 0.0;
    double lambda2 = 0.0;

    int p() const { return x_clean.cols; }
    int state_dim() const { return p() * n_classes; }
    int param_dim() const { return x_corr.rows * p(); }
    int n_total() const { return x_clean.rows + x_corr.rows; }

    void validate() const {
        for (int lbl : y_clean)
            if (lbl < 0 || lbl >= n_classes) throw std::invalid_argument("label out of range");
        for (int lbl : y_corr)
            if (lbl < 0 || lbl >= n_classes) throw std::invalid_argument("label out of range");
        if (x_corr.rows > 0 && x_corr.cols != x_clean.cols)
            throw std::invalid_argument("feature dimension mismatch");
    }

    bool is_corr(std::int64_t row) const { return row >= x_clean.rows; }
    double row_weight(std::int64_t row) const {
        return is_corr(row) ? 0.5 / static_cast<double>(x_corr.rows)
                            : 0.5 / static_cast<double>(x_clean.rows);
    }
    const double* row_features(std::int64_t row, const Vec& lambda, Vec& scratch) const {
        if (!is_corr(row)) return &x_clean.a[static_cast<std::size_t>(row) * p()];
        const std::int64_t r = row - x_clean.rows;
        scratch.resize(static_cast<std::size_t>(p()));
        const double* base = &x_corr.a[static_cast<std::size_t>(r) * p()];
        const double* gamma = &lambda[static_cast<std::size_t>(r) * p()];
        for (int i = 0; i < p(); ++i) scratch[static_cast<std::size_t>(i)] = base[i] + gamma[i];
        return scratch.data();
    }
    int row_label(std::int64_t row) const {
        return is_corr(row) ? y_corr[static_cast<std::size_t>(row - x_clean.rows)]
                            : y_clean[static_cast<std::size_t>(row)];
    }
};

namespace detail {

// Accumulates, over the given rows with the given scale multipliers applied
// to the per-row weights, the pieces every VJP/JVP of the multinomial map
// needs. Outputs are added into the non-null destinations.
struct MultinomialPass {
    const MultinomialObjective& obj;
    const Vec& w;
    const Vec& lambda;

    // grad += sum_r scale_r * x_r (x) (p_r - e_r)
    void grad(const std::vector<std::int64_t>& rows, double scale, Vec& out) const {
        const int p = obj.p(), c = obj.n_classes;
        Vec scratch;
        for (const auto row : rows) {
            const double* xr = obj.row_features(row, lambda, scratch);
            Vec prob = softmax(logits(xr, p, w, c));
            prob[static_cast<std::size_t>(obj.row_label(row))] -= 1.0;
            const double s = scale * obj.row_weight(row);
            for (int i = 0; i < p; ++i) {
                const double f = s * xr[i];
                if (f == 0.0) continue;
                double* orow = &out[static_cast<std::size_t>(i) * c];
                for (int j = 0; j < c; ++j) orow[j] += f * prob[static_cast<std::size_t>(j)];
            }
        }
    }

    // hvp += sum_r scale_r * x_r (x) H_r(V^T x_r), the symmetric state Hessian action.
    void hessian_vp(const std::vector<std::int64_t>& rows, double scale, const Vec& v, Vec& out) const {
        const int p = obj.p(), c = obj.n_classes;
        Vec scratch;
        for (const auto row : rows) {
            const double* xr = obj.row_features(row, lambda, scratch);
            const Vec prob = softmax(logits(xr, p, w, c));
            const Vec dz = logits(xr, p, v, c);
            const Vec h = softmax_hvp(prob, dz);
            const double s = scale * obj.row_weight(row);
            for (int i = 0; i < p; ++i) {
                const double f = s * xr[i];
                if (f == 0.0) continue;
                double* orow = &out[static_cast<std::size_t>(i) * c];
                for (int j = 0; j < c; ++j) orow[j] += f * h[static_cast<std::size_t>(j)];
            }
        }
    }

    // Gamma-VJP of <V, grad_w f>: for each corrupted row r in `rows`,
    //   out_r += scale_r * [ V (p_r - e_r) + W H_r(V^T x_r) ]   (in R^p)
    void gamma_vjp(const std::vector<std::int64_t>& rows, double scale, const Vec& v, Vec& out) const {
        const int p = obj.p(), c = obj.n_classes;
        Vec scratch;
        for (const auto row : rows) {
            if (!obj.is_corr(row)) continue;
            const std::int64_t r = row - obj.x_clean.rows;
            const double* xr = obj.row_features(row, lambda, scratch);
            Vec prob = softmax(logits(xr, p, w, c));
            const Vec vx = logits(xr, p, v, c);  // V^T x_r
            const Vec h = softmax_hvp(prob, vx);
            prob[static_cast<std::size_t>(obj.row_label(row))] -= 1.0;
            const double s = scale * obj.row_weight(row);
            double* orow = &out[static_cast<std::size_t>(r) * p];
            for (int i = 0; i < p; ++i) {
                const double* vrow = &v[static_cast<std::size_t>(i) * c];
                const double* wrow = &w[static_cast<std::size_t>(i) * c];
                double acc = 0.0;
                for (int j = 0; j < c; ++j)
                    acc += vrow[j] * prob[static_cast<std::size_t>(j)] + wrow[j] * h[static_cast<std::size_t>(j)];
                orow[i] += s * acc;
            }
        }
    }

    // Gamma-JVP: out += sum_r scale_r * [ gdot_r (x) (p_r - e_r) + x_r (x) H_r(W^T gdot_r) ]
    void gamma_jvp(const std::vector<std::int64_t>& rows, double scale, const Vec& ldot, Vec& out) const {
        const int p = obj.p(), c = obj.n_classes;
        Vec scratch;
        for (const auto row : rows) {
            if (!obj.is_corr(row)) continue;
            const std::int64_t r = row - obj.x_clean.rows;
            const double* xr = obj.row_features(row, lambda, scratch);
            const double* gd = &ldot[static_cast<std::size_t>(r) * p];
            Vec prob = softmax(logits(xr, p, w, c));
            const Vec dz = logits(gd, p, w, c);  // W^T gdot_r
            const Vec h = softmax_hvp(prob, dz);
            prob[static_cast<std::size_t>(obj.row_label(row))] -= 1.0;
            const double s = scale * obj.row_weight(row);
            for (int i = 0; i < p; ++i) {
                double* orow = &out[static_cast<std::size_t>(i) * c];
                for (int j = 0; j < c; ++j)
                    orow[j] += s * (gd[i] * prob[static_cast<std::size_t>(j)] + xr[i] * h[static_cast<std::size_t>(j)]);
            }
        }
    }
};

inline std::vector<std::int64_t> all_rows(const MultinomialObjective& obj) {
    std::vector<std::int64_t> rows(static_cast<std::size_t>(obj.n_total()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<std::int64_t>(i);
    return rows;
}

}  // namespace detail

/// One gradient-descent step on the mixed multinomial objective, with the
/// parameter-VJP differentiating through Gamma. Full-batch version.
inline MapSelection grad_step_multinomial(const MultinomialObjective& obj,
                                          std::optional<double> q = std::nullopt) {
    obj.validate();
    auto rows = detail::all_rows(obj);
    MapSelection m;
    m.state_dim = obj.state_dim();
    m.param_dim = obj.param_dim();
    m.contraction_bound = q;
    m.eval = [obj, rows](const Vec& w, const Vec& lambda) {
        Vec g(w.size(), 0.0);
        detail::MultinomialPass{obj, w, lambda}.grad(rows, 1.0, g);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = w[i] - obj.eta * (g[i] + obj.lambda2 * w[i]);
        return r;
    };
    m.vjp_state = [obj, rows](const Vec& w, const Vec& lambda, const Vec& v) {
        Vec h(v.size(), 0.0);
        detail::MultinomialPass{obj, w, lambda}.hessian_vp(rows, 1.0, v, h);
        Vec r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            r[i] = v[i] - obj.eta * (h[i] + obj.lambda2 * v[i]);
        return r;
    };
    m.vjp_param = [obj, rows](const Vec& w, const Vec& lambda, const Vec& v) {
        Vec g(static_cast<std::size_t>(obj.param_dim()), 0.0);
        detail::MultinomialPass{obj, w, lambda}.gamma_vjp(rows, 1.0, v, g);
        for (auto& x : g) x *= -obj.eta;
        return g;
    };
    m.jvp = [obj, rows](const Vec& w, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        Vec acc(w.size(), 0.0);
        detail::MultinomialPass pass{obj, w, lambda};
        pass.hessian_vp(rows, 1.0, wdot, acc);
        pass.gamma_jvp(rows, 1.0, ldot, acc);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = wdot[i] - obj.eta * (acc[i] + obj.lambda2 * wdot[i]);
        return r;
    };
    return m;
}

/// Minibatch variant: a token is an index set into the n + n' combined rows;
/// per-row weights are rescaled by n_total/|B| so the estimator is unbiased.
inline StochasticMapSelection grad_step_multinomial_minibatch(const MultinomialObjective& obj,
                                                              std::optional<double> q = std::nullopt) {
    obj.validate();
    StochasticMapSelection s;
    s.state_dim = obj.state_dim();
    s.param_dim = obj.param_dim();
    s.full = grad_step_multinomial(obj, q);
    auto scale_of = [obj](const SampleToken& tok) {
        return static_cast<double>(obj.n_total()) / static_cast<double>(tok.size());
    };
    s.eval = [obj, scale_of](const Vec& w, const Vec& lambda, const SampleToken& tok) {
        Vec g(w.size(), 0.0);
        detail::MultinomialPass{obj, w, lambda}.grad(tok, scale_of(tok), g);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = w[i] - obj.eta * (g[i] + obj.lambda2 * w[i]);
        return r;
    };
    s.vjp_state = [obj, scale_of](const Vec& w, const Vec& lambda, const Vec& v, const SampleToken& tok) {
        Vec h(v.size(), 0.0);
        detail::MultinomialPass{obj, w, lambda}.hessian_vp(tok, scale_of(tok), v, h);
        Vec r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            r[i] = v[i] - obj.eta * (h[i] + obj.lambda2 * v[i]);
        return r;
    };
    s.vjp_param = [obj, scale_of](const Vec& w, const Vec& lambda, const Vec& v, const SampleToken& tok) {
        Vec g(static_cast<std::size_t>(obj.param_dim()), 0.0);
        detail::MultinomialPass{obj, w, lambda}.gamma_vjp(tok, scale_of(tok), v, g);
        for (auto& x : g) x *= -obj.eta;
        return g;
    };
    s.jvp = [obj, scale_of](const Vec& w, const Vec& lambda, const Vec& wdot, const Vec& ldot,
                            const SampleToken& tok) {
        Vec acc(w.size(), 0.0);
        detail::MultinomialPass pass{obj, w, lambda};
        const double sc = scale_of(tok);
        pass.hessian_vp(tok, sc, wdot, acc);
        pass.gamma_jvp(tok, sc, ldot, acc);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = wdot[i] - obj.eta * (acc[i] + obj.lambda2 * wdot[i]);
        return r;
    };
    s.population.reserve(static_cast<std::size_t>(obj.n_total()));
    for (int i = 0; i < obj.n_total(); ++i) s.population.push_back({i});
    return s;
}

}  // namespace fixdiff
