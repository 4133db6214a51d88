#pragma once

// Minimal dense linear algebra and deterministic randomness. Everything here
// is 64-bit float, row-major, and reproducible: the PRNG is xoshiro256**
// seeded via splitmix64, Gaussians come from Box-Muller on the uniform
// stream, and power iterations start from the normalized all-ones vector so
// repeated runs give identical results.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fixdiff {

using Vec = std::vector<double>;

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;  // row-major, size rows*cols

    Mat() = default;
    Mat(int r, int c, double fill = 0.0)
        : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
};

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Mat& m) { return all_finite(m.a); }

inline double dot(const Vec& x, const Vec& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

inline double norm_inf(const Vec& x) {
    double m = 0.0;
    for (double v : x) m = std::max(m, std::abs(v));
    return m;
}

inline Vec operator+(const Vec& x, const Vec& y) {
    Vec r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] + y[i];
    return r;
}

inline Vec operator-(const Vec& x, const Vec& y) {
    Vec r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - y[i];
    return r;
}

inline Vec operator*(double a, const Vec& x) {
    Vec r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = a * x[i];
    return r;
}

/// y <- a*x + y
inline void axpy(double a, const Vec& x, Vec& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline Vec matvec(const Mat& m, const Vec& x) {
    Vec r(m.rows, 0.0);
    for (int i = 0; i < m.rows; ++i) {
        double s = 0.0;
        const double* row = &m.a[static_cast<std::size_t>(i) * m.cols];
        for (int j = 0; j < m.cols; ++j) s += row[j] * x[j];
        r[i] = s;
    }
    return r;
}

/// M^T x
inline Vec matvec_t(const Mat& m, const Vec& x) {
    Vec r(m.cols, 0.0);
    for (int i = 0; i < m.rows; ++i) {
        const double* row = &m.a[static_cast<std::size_t>(i) * m.cols];
        for (int j = 0; j < m.cols; ++j) r[j] += row[j] * x[i];
    }
    return r;
}

inline Mat transpose(const Mat& m) {
    Mat t(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline double frobenius_norm(const Mat& m) {
    double s = 0.0;
    for (double v : m.a) s += v * v;
    return std::sqrt(s);
}

// --------------------------------------------------------------------------
// Deterministic randomness
// --------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

/// Derives a child seed from (seed, stream). Distinct streams give
/// independent lineages, used to keep sample streams disjoint.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0xA0761D6478BD642FULL * (stream + 1));
    return detail::splitmix64_next(s);
}

/// xoshiro256** seeded via splitmix64. Identical seed => identical stream on
/// every platform. Gaussian draws use Box-Muller on the uniform stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = detail::splitmix64_next(sm);
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::int64_t next_index(std::int64_t n) {
        return static_cast<std::int64_t>(next_uniform() * static_cast<double>(n)) % n;
    }

    double next_gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - next_uniform();  // (0, 1]
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

private:
    std::array<std::uint64_t, 4> s_{};
    std::uint64_t seed_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

inline Vec gaussian(Rng& rng, int n) {
    Vec v(static_cast<std::size_t>(std::max(n, 0)));
    for (auto& x : v) x = rng.next_gaussian();
    return v;
}

// --------------------------------------------------------------------------
// Spectral norm, Gram eigenvalues, dense solve
// --------------------------------------------------------------------------

/// Operator (spectral) norm via power iteration on M^T M, started from the
/// normalized all-ones vector. Returns sigma with
/// |sigma - ||M||_2| <= tol * max(1, ||M||_2).
inline double spectral_norm(const Mat& m, double tol = 1e-12) {
    if (!all_finite(m)) throw std::runtime_error("non-finite matrix");
    if (m.rows == 0 || m.cols == 0) return 0.0;
    Vec v(static_cast<std::size_t>(m.cols), 1.0 / std::sqrt(static_cast<double>(m.cols)));
    double sigma = 0.0, sigma_prev = -1.0;
    for (int iter = 0; iter < 100000; ++iter) {
        Vec u = matvec(m, v);
        sigma = norm2(u);
        if (sigma == 0.0) return 0.0;
        Vec w = matvec_t(m, u);
        const double nw = norm2(w);
        if (nw == 0.0) break;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / nw;
        if (std::abs(sigma - sigma_prev) <= tol * std::max(1.0, sigma)) break;
        sigma_prev = sigma;
    }
    return sigma;
}

namespace detail {

/// Largest eigenvalue of a symmetric PSD matrix, all-ones start vector.
inline double top_eig_sym(const Mat& s, double tol) {
    const int d = s.rows;
    if (d == 0) return 0.0;
    Vec v(static_cast<std::size_t>(d), 1.0 / std::sqrt(static_cast<double>(d)));
    double lam = 0.0, lam_prev = -1.0;
    for (int iter = 0; iter < 200000; ++iter) {
        Vec u = matvec(s, v);
        lam = dot(v, u);
        const double nu = norm2(u);
        if (nu == 0.0) return 0.0;
        for (int i = 0; i < d; ++i) v[i] = u[i] / nu;
        if (std::abs(lam - lam_prev) <= tol * std::max(1.0, std::abs(lam))) break;
        lam_prev = lam;
    }
    return lam;
}

}  // namespace detail

/// Largest and smallest eigenvalues of n^{-1} X^T X. The smallest is
/// recovered by power iteration on the shifted matrix L*I - n^{-1} X^T X.
/// Both are clamped to >= 0.
inline std::pair<double, double> extreme_eigs_gram(const Mat& x, double tol = 1e-10) {
    if (!all_finite(x)) throw std::runtime_error("non-finite matrix");
    const int n = x.rows, d = x.cols;
    if (n == 0 || d == 0) return {0.0, 0.0};
    Mat s(d, d);
    for (int i = 0; i < n; ++i) {
        const double* row = &x.a[static_cast<std::size_t>(i) * d];
        for (int j = 0; j < d; ++j)
            for (int k = j; k < d; ++k) s(j, k) += row[j] * row[k];
    }
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            s(j, k) /= static_cast<double>(n);
            s(k, j) = s(j, k);
        }
    const double big = std::max(detail::top_eig_sym(s, tol), 0.0);
    Mat shifted(d, d);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) shifted(j, k) = (j == k ? big : 0.0) - s(j, k);
    const double nu = std::max(detail::top_eig_sym(shifted, tol), 0.0);
    const double small = std::max(big - nu, 0.0);
    return {big, small};
}

/// Solves A x = b by partial-pivot LU. Throws "singular system at pivot k"
/// when the pivot magnitude drops to <= 1e-12.
inline Vec solve_dense(Mat a, Vec b) {
    const int n = a.rows;
    if (a.cols != n || static_cast<int>(b.size()) != n)
        throw std::invalid_argument("solve_dense: shape mismatch");
    if (!all_finite(a) || !all_finite(b)) throw std::runtime_error("non-finite matrix");
    std::vector<int> piv(n);
    for (int k = 0; k < n; ++k) {
        int p = k;
        double best = std::abs(a(k, k));
        for (int i = k + 1; i < n; ++i) {
            const double v = std::abs(a(i, k));
            if (v > best) {
                best = v;
                p = i;
            }
        }
        if (best <= 1e-12)
            throw std::runtime_error("singular system at pivot " + std::to_string(k));
        piv[k] = p;
        if (p != k) {
            for (int j = 0; j < n; ++j) std::swap(a(k, j), a(p, j));
            std::swap(b[k], b[p]);
        }
        const double inv_pivot = 1.0 / a(k, k);
        for (int i = k + 1; i < n; ++i) {
            const double f = a(i, k) * inv_pivot;
            a(i, k) = f;
            for (int j = k + 1; j < n; ++j) a(i, j) -= f * a(k, j);
            b[i] -= f * b[k];
        }
    }
    Vec x(static_cast<std::size_t>(n));
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
        x[i] = s / a(i, i);
    }
    return x;
}

/// Dense inverse via column-wise solve_dense. Oracle-scale only.
inline Mat invert_dense(const Mat& a) {
    const int n = a.rows;
    Mat inv(n, n);
    for (int j = 0; j < n; ++j) {
        Vec e(static_cast<std::size_t>(n), 0.0);
        e[static_cast<std::size_t>(j)] = 1.0;
        Vec col = solve_dense(a, e);
        for (int i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
}

}  // namespace fixdiff
