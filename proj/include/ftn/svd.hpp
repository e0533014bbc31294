#pragma once

// Dense SVD by one-sided Jacobi rotations. Adequate and simple at the
// matrix sizes this project sees (hundreds by tens); everything runs in
// the tensor's own precision, callers use double where accuracy matters.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ftn/tensor.hpp"

namespace ftn {

template <typename T>
struct SvdResult {
    Tensor<T> u;            // [m, r] orthonormal columns (zero column where sigma is 0)
    std::vector<T> sigma;   // r = min(m, n), descending
    Tensor<T> v;            // [n, r] orthonormal columns
};

namespace detail {

// one-sided Jacobi on a tall-or-square matrix, m >= n
template <typename T>
SvdResult<T> svd_tall(const Tensor<T>& m_in) {
    const std::size_t m = m_in.dim(0), n = m_in.dim(1);
    // column-major working copy: a[j] is column j
    std::vector<std::vector<T>> a(n, std::vector<T>(m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a[j][i] = m_in[i * n + j];
    std::vector<std::vector<T>> v(n, std::vector<T>(n, T(0)));
    for (std::size_t j = 0; j < n; ++j) v[j][j] = T(1);

    const T eps = std::numeric_limits<T>::epsilon();
    const std::size_t max_sweeps = 60;
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                T app = 0, aqq = 0, apq = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    app += a[p][i] * a[p][i];
                    aqq += a[q][i] * a[q][i];
                    apq += a[p][i] * a[q][i];
                }
                if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == T(0)) continue;
                rotated = true;
                const T zeta = (aqq - app) / (2 * apq);
                const T t_val = (zeta >= 0 ? T(1) : T(-1)) /
                                (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
                const T c = 1 / std::sqrt(1 + t_val * t_val);
                const T s = c * t_val;
                for (std::size_t i = 0; i < m; ++i) {
                    const T ap = a[p][i], aq = a[q][i];
                    a[p][i] = c * ap - s * aq;
                    a[q][i] = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const T vp = v[p][i], vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<T> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        T norm2 = 0;
        for (std::size_t i = 0; i < m; ++i) norm2 += a[j][i] * a[j][i];
        sigma[j] = std::sqrt(norm2);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult<T> out;
    out.u = Tensor<T>({m, n});
    out.v = Tensor<T>({n, n});
    out.sigma.resize(n);
    for (std::size_t jj = 0; jj < n; ++jj) {
        const std::size_t j = order[jj];
        out.sigma[jj] = sigma[j];
        if (sigma[j] > T(0)) {
            for (std::size_t i = 0; i < m; ++i) out.u[i * n + jj] = a[j][i] / sigma[j];
        }
        for (std::size_t i = 0; i < n; ++i) out.v[i * n + jj] = v[j][i];
    }
    return out;
}

}  // namespace detail

template <typename T>
SvdResult<T> svd(const Tensor<T>& m) {
    if (m.rank() != 2) throw std::invalid_argument("svd: input must be 2-D, got " + shape_str(m.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    if (rows >= cols) return detail::svd_tall(m);
    // svd(Mᵀ) = (V, Σ, U)
    Tensor<T> mt({cols, rows});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) mt[j * rows + i] = m[i * cols + j];
    SvdResult<T> t = detail::svd_tall(mt);
    SvdResult<T> out;
    out.u = std::move(t.v);
    out.v = std::move(t.u);
    out.sigma = std::move(t.sigma);
    return out;
}

template <typename T>
struct TruncatedSvd {
    Tensor<T> u;           // [m, R]
    std::vector<T> sigma;  // length R
    Tensor<T> v;           // [n, R]
    double error;          // sqrt of discarded sigma^2 (best rank-R residual)
};

template <typename T>
TruncatedSvd<T> truncated_svd(const Tensor<T>& m, std::size_t rank) {
    if (m.rank() != 2)
        throw std::invalid_argument("truncated_svd: input must be 2-D, got " +
                                    shape_str(m.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    const std::size_t full = std::min(rows, cols);
    if (rank < 1 || rank > full)
        throw std::invalid_argument("truncated_svd: rank " + std::to_string(rank) +
                                    " outside [1, " + std::to_string(full) + "]");
    SvdResult<T> s = svd(m);
    TruncatedSvd<T> out;
    out.u = Tensor<T>({rows, rank});
    out.v = Tensor<T>({cols, rank});
    out.sigma.assign(s.sigma.begin(), s.sigma.begin() + rank);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < rank; ++j) out.u[i * rank + j] = s.u[i * full + j];
    for (std::size_t i = 0; i < cols; ++i)
        for (std::size_t j = 0; j < rank; ++j) out.v[i * rank + j] = s.v[i * full + j];
    double discarded = 0.0;
    for (std::size_t j = rank; j < full; ++j)
        discarded += static_cast<double>(s.sigma[j]) * static_cast<double>(s.sigma[j]);
    out.error = std::sqrt(discarded);
    return out;
}

}  // namespace ftn
