#pragma once

// Concrete problem builders and data handling: synthetic elastic net,
// synthetic multiclass data poisoning, CSV/IDX ingestion, and splits.
//
// Both builders wire the Appendix-F step size live: eta(lambda_2) =
// 2/(c(L+mu) + 2 lambda_2) is recomputed from the parameter vector at every
// call but treated as a constant during differentiation (the fixed point is
// invariant to eta, so the implicit derivative is unaffected).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fixdiff/bilevel.hpp"
#include "fixdiff/linalg.hpp"
#include "fixdiff/maps.hpp"
#include "fixdiff/solver.hpp"

namespace fixdiff {

struct Dataset {
    Mat x;
    Vec targets;              // regression targets; empty for classification
    std::vector<int> labels;  // class labels; empty for regression
    int n_classes = 0;

    int n() const { return x.rows; }
    int dim() const { return x.cols; }
    bool is_classification() const { return n_classes > 0; }

    void validate() const {
        if (is_classification()) {
            if (static_cast<int>(labels.size()) != x.rows)
                throw std::invalid_argument("Dataset: label count mismatch");
            for (int lbl : labels)
                if (lbl < 0 || lbl >= n_classes) throw std::invalid_argument("label out of range");
        } else if (static_cast<int>(targets.size()) != x.rows) {
            throw std::invalid_argument("Dataset: target count mismatch");
        }
    }
};

/// A concrete fixed-point instance: maps, samplers, upper level, and the
/// step-size/contraction constants with their provenance.
struct ProblemSpec {
    int d = 0;
    int m = 0;
    MapSelection G, T, phi;
    StochasticMapSelection That;
    UpperLevel E;
    StochasticUpperLevel E_stoch;
    std::function<double(const Vec&)> eta_of;
    std::function<double(const Vec&)> q_of;
    std::string q_provenance;  // "closed-form" or "heuristic"
    std::int64_t population = 0;
    std::int64_t batch = 0;
    std::function<Vec(const Vec&)> project;  // projection onto Lambda
};

// --------------------------------------------------------------------------
// Synthetic data
// --------------------------------------------------------------------------

namespace detail {

/// Cholesky factor of a symmetric positive-definite matrix.
inline Mat cholesky(const Mat& s) {
    const int n = s.rows;
    Mat l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = s(i, j);
            for (int k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
            if (i == j) {
                if (sum <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
                l(i, j) = std::sqrt(sum);
            } else {
                l(i, j) = sum / l(j, j);
            }
        }
    }
    return l;
}

/// Covariance for the informative block: Gram of a standard normal square
/// matrix, normalized by its largest eigenvalue.
inline Mat correlated_covariance(Rng& rng, int k) {
    Mat a(k, k);
    for (auto& v : a.a) v = rng.next_gaussian();
    Mat gram(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int r = 0; r < k; ++r) s += a(r, i) * a(r, j);
            gram(i, j) = s;
        }
    const double top = detail::top_eig_sym(gram, 1e-12);
    for (auto& v : gram.a) v /= top;
    return gram;
}

inline Mat sample_design(Rng& rng, int n, int d, int n_informative, const Mat* chol_factor) {
    Mat x(n, d);
    Vec z(static_cast<std::size_t>(n_informative));
    for (int r = 0; r < n; ++r) {
        if (chol_factor) {
            for (auto& v : z) v = rng.next_gaussian();
            for (int i = 0; i < n_informative; ++i) {
                double s = 0.0;
                for (int k = 0; k <= i; ++k) s += (*chol_factor)(i, k) * z[static_cast<std::size_t>(k)];
                x(r, i) = s;
            }
            for (int i = n_informative; i < d; ++i) x(r, i) = rng.next_gaussian();
        } else {
            for (int i = 0; i < d; ++i) x(r, i) = rng.next_gaussian();
        }
    }
    return x;
}

}  // namespace detail

struct ElasticNetData {
    Dataset train;
    Dataset val;
    Vec w_true;
};

/// Synthetic regression data: X rows i.i.d. N(0, Sigma) with Sigma = I or
/// the normalized-Gram covariance on the first n_informative coordinates;
/// w_true standard normal with non-informative entries zeroed;
/// y = X w_true + eps with eps ~ N(0.1, 1). Validation set of size 2n.
inline ElasticNetData gen_elastic_net(std::uint64_t seed, int n, int d, int n_informative,
                                      bool correlated) {
    if (n_informative <= 0 || n_informative > d)
        throw std::invalid_argument("gen_elastic_net: need 0 < n_informative <= d");
    Rng rng(seed);
    Mat chol_factor;
    const Mat* chol_ptr = nullptr;
    if (correlated) {
        chol_factor = detail::cholesky(detail::correlated_covariance(rng, n_informative));
        chol_ptr = &chol_factor;
    }
    ElasticNetData data;
    data.train.x = detail::sample_design(rng, n, d, n_informative, chol_ptr);
    data.w_true = gaussian(rng, d);
    for (int i = n_informative; i < d; ++i) data.w_true[static_cast<std::size_t>(i)] = 0.0;
    data.train.targets = matvec(data.train.x, data.w_true);
    for (auto& y : data.train.targets) y += 0.1 + rng.next_gaussian();
    const int n_val = 2 * n;
    data.val.x = detail::sample_design(rng, n_val, d, n_informative, chol_ptr);
    data.val.targets = matvec(data.val.x, data.w_true);
    for (auto& y : data.val.targets) y += 0.1 + rng.next_gaussian();
    return data;
}

/// Balanced Gaussian blobs: class means drawn on a sphere of the given
/// radius, unit isotropic noise. Labels cycle 0..c-1.
inline Dataset gen_blobs(std::uint64_t seed, int n, int p, int n_classes, double radius = 3.0) {
    Rng rng(seed);
    std::vector<Vec> means;
    means.reserve(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        Vec dir = gaussian(rng, p);
        const double nd = norm2(dir);
        for (auto& v : dir) v = radius * v / nd;
        means.push_back(std::move(dir));
    }
    Dataset ds;
    ds.x = Mat(n, p);
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.n_classes = n_classes;
    for (int r = 0; r < n; ++r) {
        const int lbl = r % n_classes;
        ds.labels[static_cast<std::size_t>(r)] = lbl;
        for (int j = 0; j < p; ++j)
            ds.x(r, j) = means[static_cast<std::size_t>(lbl)][static_cast<std::size_t>(j)] + rng.next_gaussian();
    }
    return ds;
}

/// Gamma initialization: standard normal entries projected into [-0.1, 0.1].
inline Vec gamma_init(Rng& rng, int n_corr, int p) {
    Vec g = gaussian(rng, n_corr * p);
    for (auto& v : g) v = std::min(0.1, std::max(-0.1, v));
    return g;
}

// --------------------------------------------------------------------------
// Elastic net problem
// --------------------------------------------------------------------------

/// Elastic net fixed-point problem with lambda = (lambda_1, lambda_2):
/// T is the gradient step on (1/n)||Xw - y||^2 + (lambda_2/2)||w||^2, G is
/// soft-thresholding with theta = eta(lambda_2) * lambda_1, and E is the
/// validation mean squared error.
inline ProblemSpec build_elastic_net(const Dataset& train, const Dataset& val, double c = 1.0) {
    if (train.n() == 0 || val.n() == 0) throw std::invalid_argument("build_elastic_net: empty data");
    const auto [big, small] = extreme_eigs_gram(train.x);
    const Mat x = train.x;
    const Vec y = train.targets;
    const double inv_n = 1.0 / static_cast<double>(x.rows);

    ProblemSpec spec;
    spec.d = x.cols;
    spec.m = 2;
    spec.q_provenance = "closed-form";
    spec.population = x.rows;
    spec.batch = std::max<std::int64_t>(1, x.rows / 10);
    spec.eta_of = [big = big, small = small, c](const Vec& lambda) {
        return ista_step_size_from_eigs(big, small, lambda[1], c).first;
    };
    spec.q_of = [big = big, small = small, c](const Vec& lambda) {
        return ista_step_size_from_eigs(big, small, lambda[1], c).second;
    };
    auto eta_of = spec.eta_of;

    auto full_grad = [x, y, inv_n](const Vec& w, double lambda2) {
        Vec r = matvec(x, w);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
        Vec g = matvec_t(x, r);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * inv_n * g[i] + lambda2 * w[i];
        return g;
    };

    MapSelection t_map;
    t_map.state_dim = spec.d;
    t_map.param_dim = 2;
    t_map.eval = [full_grad, eta_of](const Vec& w, const Vec& lambda) {
        const double eta = eta_of(lambda);
        Vec g = full_grad(w, lambda[1]);
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = w[i] - eta * g[i];
        return r;
    };
    t_map.vjp_state = [x, inv_n, eta_of](const Vec&, const Vec& lambda, const Vec& v) {
        const double eta = eta_of(lambda);
        Vec g = matvec_t(x, matvec(x, v));
        Vec r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            r[i] = v[i] - eta * (2.0 * inv_n * g[i] + lambda[1] * v[i]);
        return r;
    };
    t_map.vjp_param = [eta_of](const Vec& w, const Vec& lambda, const Vec& v) {
        return Vec{0.0, -eta_of(lambda) * dot(w, v)};
    };
    t_map.jvp = [x, inv_n, eta_of](const Vec& w, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        const double eta = eta_of(lambda);
        Vec g = matvec_t(x, matvec(x, wdot));
        Vec r(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = wdot[i] - eta * (2.0 * inv_n * g[i] + lambda[1] * wdot[i]) - eta * ldot[1] * w[i];
        return r;
    };
    spec.T = t_map;

    MapSelection g_map;
    g_map.state_dim = spec.d;
    g_map.param_dim = 2;
    g_map.eval = [eta_of](const Vec& u, const Vec& lambda) {
        return soft_threshold(u, eta_of(lambda) * lambda[0]);
    };
    g_map.vjp_state = [eta_of](const Vec& u, const Vec& lambda, const Vec& v) {
        return soft_threshold_selection(u, eta_of(lambda) * lambda[0], v).first;
    };
    g_map.vjp_param = [eta_of](const Vec& u, const Vec& lambda, const Vec& v) {
        const double eta = eta_of(lambda);
        return Vec{eta * soft_threshold_selection(u, eta * lambda[0], v).second, 0.0};
    };
    g_map.jvp = [eta_of](const Vec& u, const Vec& lambda, const Vec& wdot, const Vec& ldot) {
        const double eta = eta_of(lambda);
        const double theta = eta * lambda[0];
        const double thetadot = eta * ldot[0];
        Vec r(u.size(), 0.0);
        for (std::size_t i = 0; i < u.size(); ++i)
            if (std::abs(u[i]) > theta) r[i] = wdot[i] - (u[i] > 0.0 ? 1.0 : -1.0) * thetadot;
        return r;
    };
    spec.G = g_map;
    spec.phi = compose(spec.G, spec.T);

    StochasticMapSelection that;
    that.state_dim = spec.d;
    that.param_dim = 2;
    that.full = t_map;
    that.eval = [x, y, eta_of](const Vec& w, const Vec& lambda, const SampleToken& tok) {
        const double eta = eta_of(lambda);
        Vec g(w.size(), 0.0);
        for (const auto r : tok) {
            const double* row = &x.a[static_cast<std::size_t>(r) * x.cols];
            double resid = -y[static_cast<std::size_t>(r)];
            for (int j = 0; j < x.cols; ++j) resid += row[j] * w[static_cast<std::size_t>(j)];
            for (int j = 0; j < x.cols; ++j) g[static_cast<std::size_t>(j)] += row[j] * resid;
        }
        const double f = 2.0 / static_cast<double>(tok.size());
        Vec out(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            out[i] = w[i] - eta * (f * g[i] + lambda[1] * w[i]);
        return out;
    };
    that.vjp_state = [x, eta_of](const Vec&, const Vec& lambda, const Vec& v, const SampleToken& tok) {
        const double eta = eta_of(lambda);
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
    that.vjp_param = [eta_of](const Vec& w, const Vec& lambda, const Vec& v, const SampleToken&) {
        return Vec{0.0, -eta_of(lambda) * dot(w, v)};
    };
    that.jvp = [vs = that.vjp_state, eta_of](const Vec& w, const Vec& lambda, const Vec& wdot,
                                             const Vec& ldot, const SampleToken& tok) {
        const double eta = eta_of(lambda);
        Vec r = vs(w, lambda, wdot, tok);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= eta * ldot[1] * w[i];
        return r;
    };
    that.population.reserve(static_cast<std::size_t>(x.rows));
    for (int i = 0; i < x.rows; ++i) that.population.push_back({i});
    spec.That = that;

    const Mat xv = val.x;
    const Vec yv = val.targets;
    const double inv_nv = 1.0 / static_cast<double>(xv.rows);
    spec.E.state_dim = spec.d;
    spec.E.param_dim = 2;
    spec.E.eval = [xv, yv, inv_nv](const Vec& w, const Vec&) {
        Vec r = matvec(xv, w);
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            const double e = r[i] - yv[i];
            s += e * e;
        }
        return inv_nv * s;
    };
    spec.E.grad_state = [xv, yv, inv_nv](const Vec& w, const Vec&) {
        Vec r = matvec(xv, w);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= yv[i];
        Vec g = matvec_t(xv, r);
        for (auto& v : g) v *= 2.0 * inv_nv;
        return g;
    };
    spec.E.grad_param = [](const Vec&, const Vec&) { return Vec{0.0, 0.0}; };

    spec.E_stoch.full = spec.E;
    spec.E_stoch.population = xv.rows;
    spec.E_stoch.eval = [xv, yv](const Vec& w, const Vec&, const SampleToken& tok) {
        double s = 0.0;
        for (const auto r : tok) {
            const double* row = &xv.a[static_cast<std::size_t>(r) * xv.cols];
            double e = -yv[static_cast<std::size_t>(r)];
            for (int j = 0; j < xv.cols; ++j) e += row[j] * w[static_cast<std::size_t>(j)];
            s += e * e;
        }
        return s / static_cast<double>(tok.size());
    };
    spec.E_stoch.grad_state = [xv, yv](const Vec& w, const Vec&, const SampleToken& tok) {
        Vec g(w.size(), 0.0);
        for (const auto r : tok) {
            const double* row = &xv.a[static_cast<std::size_t>(r) * xv.cols];
            double e = -yv[static_cast<std::size_t>(r)];
            for (int j = 0; j < xv.cols; ++j) e += row[j] * w[static_cast<std::size_t>(j)];
            for (int j = 0; j < xv.cols; ++j) g[static_cast<std::size_t>(j)] += row[j] * e;
        }
        const double f = 2.0 / static_cast<double>(tok.size());
        for (auto& v : g) v *= f;
        return g;
    };
    spec.E_stoch.grad_param = [](const Vec&, const Vec&, const SampleToken&) { return Vec{0.0, 0.0}; };

    spec.project = [](const Vec& lambda) {
        Vec p = lambda;
        for (auto& v : p) v = std::max(v, 0.0);
        return p;
    };
    return spec;
}

// --------------------------------------------------------------------------
// Data poisoning problem
// --------------------------------------------------------------------------

/// Data poisoning with parameter lambda = vec(Gamma) in R^{n' x p}
/// (row-major): T is one gradient step on
///   ce(X w, y)/2 + ce((Xt + Gamma) w, yt)/2 + (lambda2/2)||w||^2,
/// G is soft-thresholding with theta = eta lambda_1 fixed, and E is the
/// validation mean cross-entropy. (eta, q) come from the stacked design at
/// Gamma = 0 with the Appendix-F constant c.
inline ProblemSpec build_poisoning(const Dataset& clean, const Dataset& corruptible,
                                   const Dataset& val, double lambda1, double lambda2,
                                   double c = 0.1) {
    clean.validate();
    corruptible.validate();
    val.validate();
    if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("build_poisoning: bad lambdas");
    const int p = clean.dim();
    const int n_classes = clean.n_classes;
    Mat stacked(clean.n() + corruptible.n(), p);
    std::copy(clean.x.a.begin(), clean.x.a.end(), stacked.a.begin());
    std::copy(corruptible.x.a.begin(), corruptible.x.a.end(),
              stacked.a.begin() + clean.x.a.size());
    const auto [big, small] = extreme_eigs_gram(stacked);
    const auto [eta, q] = ista_step_size_from_eigs(big, small, lambda2, c);

    MultinomialObjective obj;
    obj.x_clean = clean.x;
    obj.y_clean = clean.labels;
    obj.x_corr = corruptible.x;
    obj.y_corr = corruptible.labels;
    obj.n_classes = n_classes;
    obj.eta = eta;
    obj.lambda2 = lambda2;

    ProblemSpec spec;
    spec.d = p * n_classes;
    spec.m = corruptible.n() * p;
    spec.q_provenance = "heuristic";  // cross-entropy curvature only locally certified
    spec.population = obj.n_total();
    spec.batch = std::max<std::int64_t>(1, obj.n_total() / 10);
    spec.eta_of = [eta](const Vec&) { return eta; };
    spec.q_of = [q = q](const Vec&) { return q; };
    spec.T = grad_step_multinomial(obj);
    spec.That = grad_step_multinomial_minibatch(obj);
    spec.G = soft_threshold_map(spec.d, spec.m, eta * lambda1);
    spec.phi = compose(spec.G, spec.T, q);

    const Mat xv = val.x;
    const std::vector<int> yv = val.labels;
    const double inv_nv = 1.0 / static_cast<double>(xv.rows);
    auto ce_rows = [xv, yv, n_classes](const Vec& w, const std::vector<std::int64_t>& rows) {
        double s = 0.0;
        for (const auto r : rows) {
            const double* row = &xv.a[static_cast<std::size_t>(r) * xv.cols];
            Vec z = detail::logits(row, xv.cols, w, n_classes);
            double zmax = z[0];
            for (double v : z) zmax = std::max(zmax, v);
            double lse = 0.0;
            for (double v : z) lse += std::exp(v - zmax);
            s += std::log(lse) + zmax - z[static_cast<std::size_t>(yv[static_cast<std::size_t>(r)])];
        }
        return s;
    };
    auto ce_grad_rows = [xv, yv, n_classes](const Vec& w, const std::vector<std::int64_t>& rows) {
        Vec g(w.size(), 0.0);
        for (const auto r : rows) {
            const double* row = &xv.a[static_cast<std::size_t>(r) * xv.cols];
            Vec prob = detail::softmax(detail::logits(row, xv.cols, w, n_classes));
            prob[static_cast<std::size_t>(yv[static_cast<std::size_t>(r)])] -= 1.0;
            for (int i = 0; i < xv.cols; ++i) {
                const double xi = row[i];
                if (xi == 0.0) continue;
                double* orow = &g[static_cast<std::size_t>(i) * n_classes];
                for (int j = 0; j < n_classes; ++j) orow[j] += xi * prob[static_cast<std::size_t>(j)];
            }
        }
        return g;
    };
    std::vector<std::int64_t> all_val(static_cast<std::size_t>(xv.rows));
    for (std::size_t i = 0; i < all_val.size(); ++i) all_val[i] = static_cast<std::int64_t>(i);

    spec.E.state_dim = spec.d;
    spec.E.param_dim = spec.m;
    spec.E.eval = [ce_rows, all_val, inv_nv](const Vec& w, const Vec&) {
        return inv_nv * ce_rows(w, all_val);
    };
    spec.E.grad_state = [ce_grad_rows, all_val, inv_nv](const Vec& w, const Vec&) {
        Vec g = ce_grad_rows(w, all_val);
        for (auto& v : g) v *= inv_nv;
        return g;
    };
    spec.E.grad_param = [m = spec.m](const Vec&, const Vec&) {
        return Vec(static_cast<std::size_t>(m), 0.0);
    };

    spec.E_stoch.full = spec.E;
    spec.E_stoch.population = xv.rows;
    spec.E_stoch.eval = [ce_rows](const Vec& w, const Vec&, const SampleToken& tok) {
        return ce_rows(w, tok) / static_cast<double>(tok.size());
    };
    spec.E_stoch.grad_state = [ce_grad_rows](const Vec& w, const Vec&, const SampleToken& tok) {
        Vec g = ce_grad_rows(w, tok);
        for (auto& v : g) v /= static_cast<double>(tok.size());
        return g;
    };
    spec.E_stoch.grad_param = [m = spec.m](const Vec&, const Vec&, const SampleToken&) {
        return Vec(static_cast<std::size_t>(m), 0.0);
    };

    spec.project = [](const Vec& lambda) {
        Vec g = lambda;
        for (auto& v : g) v = std::min(0.1, std::max(-0.1, v));
        return g;
    };
    return spec;
}

/// Multiclass accuracy of the flattened p x c model on a labeled dataset.
inline double accuracy(const Vec& w, const Dataset& ds) {
    int hits = 0;
    for (int r = 0; r < ds.n(); ++r) {
        const double* row = &ds.x.a[static_cast<std::size_t>(r) * ds.x.cols];
        const Vec z = detail::logits(row, ds.x.cols, w, ds.n_classes);
        int arg = 0;
        for (int j = 1; j < ds.n_classes; ++j)
            if (z[static_cast<std::size_t>(j)] > z[static_cast<std::size_t>(arg)]) arg = j;
        if (arg == ds.labels[static_cast<std::size_t>(r)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.n());
}

// --------------------------------------------------------------------------
// Dataset I/O and splits
// --------------------------------------------------------------------------

/// CSV: header row, '.' decimal separator, '\n' line ends, last column is
/// the target, all cells strictly numeric.
inline Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_csv: missing header in " + path);
    const int n_cols = 1 + static_cast<int>(std::count(line.begin(), line.end(), ','));
    if (n_cols < 2) throw std::runtime_error("load_csv: need at least two columns in " + path);
    std::vector<double> cells;
    int n_rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw std::runtime_error("load_csv: non-numeric cell at row " +
                                         std::to_string(n_rows + 1) + " col " + std::to_string(col + 1));
            }
            if (used != cell.size())
                throw std::runtime_error("load_csv: non-numeric cell at row " +
                                         std::to_string(n_rows + 1) + " col " + std::to_string(col + 1));
            cells.push_back(v);
            ++col;
        }
        if (col != n_cols)
            throw std::runtime_error("load_csv: row " + std::to_string(n_rows + 1) + " has " +
                                     std::to_string(col) + " cells, expected " + std::to_string(n_cols));
        ++n_rows;
    }
    Dataset ds;
    ds.x = Mat(n_rows, n_cols - 1);
    ds.targets.resize(static_cast<std::size_t>(n_rows));
    for (int r = 0; r < n_rows; ++r) {
        for (int j = 0; j < n_cols - 1; ++j)
            ds.x(r, j) = cells[static_cast<std::size_t>(r) * n_cols + j];
        ds.targets[static_cast<std::size_t>(r)] = cells[static_cast<std::size_t>(r) * n_cols + n_cols - 1];
    }
    return ds;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_csv: cannot open " + path);
    char buf[64];
    for (int j = 0; j < ds.dim(); ++j) out << "f" << j << ",";
    out << "target\n";
    for (int r = 0; r < ds.n(); ++r) {
        for (int j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.x(r, j));
            out << buf << ",";
        }
        std::snprintf(buf, sizeof buf, "%.17g", ds.targets[static_cast<std::size_t>(r)]);
        out << buf << "\n";
    }
}

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, std::size_t offset) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("idx: truncated file at offset " + std::to_string(offset));
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

/// IDX loader: big-endian magic 0x00000803 (images) / 0x00000801 (labels),
/// pixels scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("load_idx: cannot open " + images_path);
    const std::uint32_t magic_img = detail::read_be_u32(img, 0);
    if (magic_img != 0x00000803u)
        throw std::runtime_error("load_idx: bad image magic at offset 0");
    const std::uint32_t count = detail::read_be_u32(img, 4);
    const std::uint32_t rows = detail::read_be_u32(img, 8);
    const std::uint32_t cols = detail::read_be_u32(img, 12);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("load_idx: cannot open " + labels_path);
    const std::uint32_t magic_lab = detail::read_be_u32(lab, 0);
    if (magic_lab != 0x00000801u)
        throw std::runtime_error("load_idx: bad label magic at offset 0");
    const std::uint32_t lab_count = detail::read_be_u32(lab, 4);
    if (lab_count != count) throw std::runtime_error("load_idx: image/label count mismatch");

    Dataset ds;
    const int pix = static_cast<int>(rows * cols);
    ds.x = Mat(static_cast<int>(count), pix);
    ds.labels.resize(count);
    std::vector<unsigned char> buf(static_cast<std::size_t>(pix));
    for (std::uint32_t r = 0; r < count; ++r) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), pix))
            throw std::runtime_error("idx: truncated file at offset " +
                                     std::to_string(16 + static_cast<std::size_t>(r) * pix));
        for (int j = 0; j < pix; ++j)
            ds.x(static_cast<int>(r), j) = static_cast<double>(buf[static_cast<std::size_t>(j)]) / 255.0;
        char lbl = 0;
        if (!lab.get(lbl))
            throw std::runtime_error("idx: truncated file at offset " + std::to_string(8 + r));
        ds.labels[r] = static_cast<int>(static_cast<unsigned char>(lbl));
        ds.n_classes = std::max(ds.n_classes, ds.labels[r] + 1);
    }
    return ds;
}

/// Seeded shuffle then contiguous slices; slice i gets floor(frac_i * n)
/// rows and the last slice takes the remainder.
inline std::vector<Dataset> split(const Dataset& ds, const std::vector<double>& fractions,
                                  std::uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) sum += f;
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
    const int n = ds.n();
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    for (int i = 0; i < n - 1; ++i) {
        const int j = i + static_cast<int>(rng.next_index(n - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    std::vector<Dataset> parts;
    int start = 0;
    for (std::size_t s = 0; s < fractions.size(); ++s) {
        const int size = (s + 1 == fractions.size())
                             ? n - start
                             : static_cast<int>(fractions[s] * static_cast<double>(n));
        if (size <= 0) throw std::invalid_argument("split: empty split");
        Dataset part;
        part.x = Mat(size, ds.dim());
        part.n_classes = ds.n_classes;
        if (ds.is_classification())
            part.labels.resize(static_cast<std::size_t>(size));
        else
            part.targets.resize(static_cast<std::size_t>(size));
        for (int r = 0; r < size; ++r) {
            const int src = idx[static_cast<std::size_t>(start + r)];
            for (int j = 0; j < ds.dim(); ++j) part.x(r, j) = ds.x(src, j);
            if (ds.is_classification())
                part.labels[static_cast<std::size_t>(r)] = ds.labels[static_cast<std::size_t>(src)];
            else
                part.targets[static_cast<std::size_t>(r)] = ds.targets[static_cast<std::size_t>(src)];
        }
        parts.push_back(std::move(part));
        start += size;
    }
    return parts;
}

}  // namespace fixdiff
