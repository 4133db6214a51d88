#pragma once

// Finite sets of equally-shaped matrices with the excess metric
// gap(A, B) = max_{a in A} min_{b in B} ||a - b||. The gap is computed over
// the finite generating sets only, never over convex hulls: since
// gap(A, B) >= gap(A, Conv(B)), the vertex distance is a valid upper bound
// for every error metric used here.

#include <limits>
#include <stdexcept>
#include <vector>

#include "fixdiff/linalg.hpp"

namespace fixdiff {

struct MatrixSet {
    std::vector<Mat> items;

    MatrixSet() = default;
    explicit MatrixSet(std::vector<Mat> elems) : items(std::move(elems)) { validate(); }
    static MatrixSet singleton(Mat m) { return MatrixSet{{std::move(m)}}; }

    int rows() const { return items.front().rows; }
    int cols() const { return items.front().cols; }
    std::size_t size() const { return items.size(); }

    void validate() const {
        if (items.empty()) throw std::invalid_argument("MatrixSet: empty set");
        for (const auto& m : items) {
            if (m.rows != rows() || m.cols != cols())
                throw std::invalid_argument("MatrixSet: non-uniform shapes");
            if (!all_finite(m)) throw std::runtime_error("non-finite matrix");
        }
    }
};

namespace detail {

inline void require_same_shape(const MatrixSet& a, const MatrixSet& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("MatrixSet: shape mismatch");
}

inline Mat mat_sub(const Mat& x, const Mat& y) {
    Mat r(x.rows, x.cols);
    for (std::size_t i = 0; i < r.a.size(); ++i) r.a[i] = x.a[i] - y.a[i];
    return r;
}

inline Mat mat_add(const Mat& x, const Mat& y) {
    Mat r(x.rows, x.cols);
    for (std::size_t i = 0; i < r.a.size(); ++i) r.a[i] = x.a[i] + y.a[i];
    return r;
}

inline Mat mat_mul(const Mat& x, const Mat& y) {
    Mat r(x.rows, y.cols);
    for (int i = 0; i < x.rows; ++i)
        for (int k = 0; k < x.cols; ++k) {
            const double v = x(i, k);
            if (v == 0.0) continue;
            for (int j = 0; j < y.cols; ++j) r(i, j) += v * y(k, j);
        }
    return r;
}

}  // namespace detail

/// Excess of A over B, exact over the finite sets.
inline double gap(const MatrixSet& a, const MatrixSet& b, double norm_tol = 1e-12) {
    detail::require_same_shape(a, b);
    double worst = 0.0;
    for (const auto& ai : a.items) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& bj : b.items)
            nearest = std::min(nearest, spectral_norm(detail::mat_sub(ai, bj), norm_tol));
        worst = std::max(worst, nearest);
    }
    return worst;
}

/// sup-norm of a set; equals gap(A, {0}).
inline double sup_norm(const MatrixSet& a, double norm_tol = 1e-12) {
    double worst = 0.0;
    for (const auto& ai : a.items) worst = std::max(worst, spectral_norm(ai, norm_tol));
    return worst;
}

/// {A + B | A in A, B in B}, cardinality |A|*|B|. No deduplication.
inline MatrixSet minkowski_sum(const MatrixSet& a, const MatrixSet& b) {
    detail::require_same_shape(a, b);
    std::vector<Mat> out;
    out.reserve(a.size() * b.size());
    for (const auto& ai : a.items)
        for (const auto& bj : b.items) out.push_back(detail::mat_add(ai, bj));
    return MatrixSet{std::move(out)};
}

/// {C A | C in C, A in A}.
inline MatrixSet set_product(const MatrixSet& c, const MatrixSet& a) {
    if (c.cols() != a.rows()) throw std::invalid_argument("set_product: shape mismatch");
    std::vector<Mat> out;
    out.reserve(c.size() * a.size());
    for (const auto& ci : c.items)
        for (const auto& aj : a.items) out.push_back(detail::mat_mul(ci, aj));
    return MatrixSet{std::move(out)};
}

/// Block slice: elements A_1 (k=1, first p1 columns) or A_2 (k=2, last p2).
inline MatrixSet block_slice(const MatrixSet& a, int k, int p1) {
    const int p2 = a.cols() - p1;
    if (p1 < 0 || p2 < 0 || (k != 1 && k != 2)) throw std::invalid_argument("block_slice");
    std::vector<Mat> out;
    out.reserve(a.size());
    for (const auto& m : a.items) {
        const int off = (k == 1) ? 0 : p1;
        const int w = (k == 1) ? p1 : p2;
        Mat s(m.rows, w);
        for (int i = 0; i < m.rows; ++i)
            for (int j = 0; j < w; ++j) s(i, j) = m(i, off + j);
        out.push_back(std::move(s));
    }
    return MatrixSet{std::move(out)};
}

/// A(X) = {A_1 X + A_2 | [A_1, A_2] in A, X in X}. Elements of A must split
/// as [A_1 | A_2] with A_1 of width p1 and X elements p1 x p2.
inline MatrixSet affine_apply(const MatrixSet& a, const MatrixSet& x) {
    const int p1 = x.rows();
    const int p2 = x.cols();
    if (a.cols() != p1 + p2) throw std::invalid_argument("affine_apply: shape mismatch");
    std::vector<Mat> out;
    out.reserve(a.size() * x.size());
    for (const auto& am : a.items) {
        for (const auto& xm : x.items) {
            Mat r(am.rows, p2);
            for (int i = 0; i < am.rows; ++i)
                for (int j = 0; j < p2; ++j) {
                    double s = am(i, p1 + j);
                    for (int k = 0; k < p1; ++k) s += am(i, k) * xm(k, j);
                    r(i, j) = s;
                }
            out.push_back(std::move(r));
        }
    }
    return MatrixSet{std::move(out)};
}

/// Elementwise inverses, for the excess-of-inverses property checks.
inline MatrixSet set_inverse(const MatrixSet& a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("set_inverse: not square");
    std::vector<Mat> out;
    out.reserve(a.size());
    for (const auto& m : a.items) out.push_back(invert_dense(m));
    return MatrixSet{std::move(out)};
}

}  // namespace fixdiff
