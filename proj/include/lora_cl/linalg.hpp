#pragma once

// Singular value decomposition and the subspace helpers built on it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lora_cl/matrix.hpp"

namespace lora_cl {

// Full SVD of an r x c matrix: m = u * diag(sigma) * transpose(v), where u is
// r x r, v is c x c (both orthogonal) and sigma holds the min(r, c) singular
// values in descending order.
struct Svd {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;
};

struct SvdOptions {
    int max_sweeps = 60;
    // Pair (i, j) counts as converged when |<w_i, w_j>| <= tol * |w_i| * |w_j|.
    double tol = 1e-12;
};

namespace detail {

// Extends the orthonormal columns of `basis` (n x k) to an n x n orthogonal
// matrix. The first k columns are returned unchanged; the remaining n - k come
// from the Householder QR of `basis`, and span its orthogonal complement.
inline Matrix complete_orthonormal(const Matrix& basis) {
    const std::size_t n = basis.rows();
    const std::size_t k = basis.cols();
    Matrix x = basis;
    std::vector<std::vector<double>> reflectors;
    reflectors.reserve(k);
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> v(n - j);
        double norm2 = 0.0;
        for (std::size_t i = j; i < n; ++i) {
            v[i - j] = x(i, j);
            norm2 += v[i - j] * v[i - j];
        }
        const double norm = std::sqrt(norm2);
        const double alpha = v[0] >= 0.0 ? -norm : norm;
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double e : v) vnorm2 += e * e;
        if (vnorm2 > 0.0) {
            const double inv = 1.0 / std::sqrt(vnorm2);
            for (double& e : v) e *= inv;
            for (std::size_t c = j; c < k; ++c) {
                double p = 0.0;
                for (std::size_t i = j; i < n; ++i) p += v[i - j] * x(i, c);
                for (std::size_t i = j; i < n; ++i) x(i, c) -= 2.0 * p * v[i - j];
            }
        } else {
            std::fill(v.begin(), v.end(), 0.0);
        }
        reflectors.push_back(std::move(v));
    }
    // q = H_0 H_1 ... H_{k-1}, applied to the identity right to left.
    Matrix q = Matrix::identity(n);
    for (std::size_t jj = k; jj-- > 0;) {
        const auto& v = reflectors[jj];
        for (std::size_t c = 0; c < n; ++c) {
            double p = 0.0;
            for (std::size_t i = jj; i < n; ++i) p += v[i - jj] * q(i, c);
            if (p == 0.0) continue;
            for (std::size_t i = jj; i < n; ++i) q(i, c) -= 2.0 * p * v[i - jj];
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) q(i, j) = basis(i, j);
    return q;
}

// One-sided Jacobi (Hestenes) on a tall matrix, rows >= cols.
inline Svd svd_tall(const Matrix& m, const SvdOptions& opt) {
    const std::size_t p = m.rows();
    const std::size_t q = m.cols();
    Matrix w = m;
    Matrix v = Matrix::identity(q);

    const double fro = frobenius_norm(m);
    // Columns below this norm are roundoff and treated as exact zeros.
    const double negligible = fro * std::numeric_limits<double>::epsilon();
    const double negligible2 = negligible * negligible;

    std::vector<double> norms2(q);
    auto col_norm2 = [&](std::size_t j) {
        double s = 0.0;
        for (std::size_t i = 0; i < p; ++i) s += w(i, j) * w(i, j);
        return s;
    };

    bool converged = q < 2 || fro == 0.0;
    double worst = 0.0;
    for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
        for (std::size_t j = 0; j < q; ++j) norms2[j] = col_norm2(j);
        bool rotated = false;
        worst = 0.0;
        for (std::size_t a = 0; a + 1 < q; ++a) {
            for (std::size_t b = a + 1; b < q; ++b) {
                const double alpha = norms2[a];
                const double beta = norms2[b];
                if (alpha <= negligible2 || beta <= negligible2) continue;
                double gamma = 0.0;
                for (std::size_t i = 0; i < p; ++i) gamma += w(i, a) * w(i, b);
                const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
                worst = std::max(worst, rel);
                if (rel <= opt.tol) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < p; ++i) {
                    const double wa = w(i, a);
                    const double wb = w(i, b);
                    w(i, a) = c * wa - s * wb;
                    w(i, b) = s * wa + c * wb;
                }
                for (std::size_t i = 0; i < q; ++i) {
                    const double va = v(i, a);
                    const double vb = v(i, b);
                    v(i, a) = c * va - s * vb;
                    v(i, b) = s * va + c * vb;
                }
                norms2[a] = col_norm2(a);
                norms2[b] = col_norm2(b);
            }
        }
        converged = !rotated;
    }
    if (!converged)
        throw NumericError("svd: no convergence after " + std::to_string(opt.max_sweeps) +
                           " sweeps on " + m.shape_str() + " matrix; worst relative off-diagonal " +
                           std::to_string(worst));

    std::vector<double> sig(q);
    for (std::size_t j = 0; j < q; ++j) {
        const double s = std::sqrt(col_norm2(j));
        sig[j] = s <= negligible ? 0.0 : s;
    }
    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

    Svd out;
    out.sigma.resize(q);
    out.v = Matrix(q, q);
    std::size_t nonzero = 0;
    for (std::size_t k = 0; k < q; ++k) {
        out.sigma[k] = sig[order[k]];
        if (out.sigma[k] > 0.0) ++nonzero;
        for (std::size_t i = 0; i < q; ++i) out.v(i, k) = v(i, order[k]);
    }
    Matrix u_valid(p, nonzero);
    for (std::size_t k = 0; k < nonzero; ++k) {
        const double inv = 1.0 / out.sigma[k];
        for (std::size_t i = 0; i < p; ++i) u_valid(i, k) = w(i, order[k]) * inv;
    }
    out.u = complete_orthonormal(u_valid);
    return out;
}

} // namespace detail

inline Svd svd(const Matrix& m, const SvdOptions& opt = {}) {
    if (!m.all_finite()) throw NumericError("svd: input " + m.shape_str() + " has non-finite entries");
    if (m.rows() >= m.cols()) return detail::svd_tall(m, opt);
    Svd t = detail::svd_tall(transpose(m), opt);
    return Svd{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

// Number of singular values above max(rows, cols) * sigma_max * 1e-12.
inline std::size_t numerical_rank(const std::vector<double>& sigma, std::size_t rows, std::size_t cols) {
    if (sigma.empty() || sigma.front() == 0.0) return 0;
    const double tau = static_cast<double>(std::max(rows, cols)) * sigma.front() * 1e-12;
    return static_cast<std::size_t>(std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > tau; }));
}

inline std::size_t numerical_rank(const Matrix& m) {
    return numerical_rank(svd(m).sigma, m.rows(), m.cols());
}

// Rows of the result are an orthonormal basis of the row space of m.
// A zero matrix yields a 0 x cols result.
inline Matrix orthonormal_rowspace_basis(const Matrix& m) {
    const Svd s = svd(m);
    const std::size_t k = numerical_rank(s.sigma, m.rows(), m.cols());
    Matrix q(k, m.cols());
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) q(i, j) = s.v(j, i);
    return q;
}

} // namespace lora_cl
