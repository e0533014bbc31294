#pragma once

// Post-hoc factorization of weight deltas: CP by alternating least squares,
// tensor-train by sequential SVD truncation, and plain truncated SVD of an
// unfolding. Callers run these in double; results are analysis artifacts,
// not trainable parameters.
//
// Reshape conventions for a conv delta [C_out,C_in,k,k]:
//   CP / TT : the 3-way view [k*k, C_in, C_out] (conv_weight_to_3way)
//   SVD     : that view flattened row-major to [k*k*C_in, C_out]
// Attention deltas [d_model,d,n] factorize as-is; their SVD unfolding is
// [d_model, d*n].

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftn/adapters.hpp"
#include "ftn/rng.hpp"
#include "ftn/svd.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

// ------------------------------------------------------------------ CP-ALS

struct CpAlsOptions {
    std::size_t max_sweeps = 200;
    double tol = 1e-8;  // stop once a sweep improves relative error by less
    std::size_t restarts = 5;
    std::uint64_t seed = 0;
    double ridge = 1e-10;  // damping on the normal-equations diagonal
};

template <typename T>
struct CpAlsResult {
    CpAdapter<T> adapter;
    double relative_error;
    // error at init then after each accepted sweep, for the winning restart;
    // nonincreasing by construction (a sweep that fails to improve is rolled
    // back and ends the restart)
    std::vector<double> sweep_errors;
};

namespace detail {

// solve (g + ridge I) X = rhs for several right-hand sides, g SPD [r,r];
// rhs and solution are [count, r] row-major
template <typename T>
void cholesky_solve_rows(std::vector<T> g, std::size_t r, double ridge, T* rhs,
                         std::size_t count) {
    for (std::size_t i = 0; i < r; ++i) g[i * r + i] += static_cast<T>(ridge);
    // in-place lower Cholesky
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            T acc = g[i * r + j];
            for (std::size_t k = 0; k < j; ++k) acc -= g[i * r + k] * g[j * r + k];
            if (i == j) {
                if (acc <= T(0)) acc = static_cast<T>(ridge);
                g[i * r + i] = std::sqrt(acc);
            } else {
                g[i * r + j] = acc / g[j * r + j];
            }
        }
    }
    for (std::size_t c = 0; c < count; ++c) {
        T* x = rhs + c * r;
        for (std::size_t i = 0; i < r; ++i) {
            T acc = x[i];
            for (std::size_t k = 0; k < i; ++k) acc -= g[i * r + k] * x[k];
            x[i] = acc / g[i * r + i];
        }
        for (std::size_t ii = r; ii-- > 0;) {
            T acc = x[ii];
            for (std::size_t k = ii + 1; k < r; ++k) acc -= g[k * r + ii] * x[k];
            x[ii] = acc / g[ii * r + ii];
        }
    }
}

template <typename T>
std::vector<T> gram_rows(const Tensor<T>& m) {
    const std::size_t r = m.dim(0), d = m.dim(1);
    std::vector<T> g(r * r, T(0));
    for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = 0; b <= a; ++b) {
            T acc = 0;
            for (std::size_t i = 0; i < d; ++i) acc += m[a * d + i] * m[b * d + i];
            g[a * r + b] = acc;
            g[b * r + a] = acc;
        }
    return g;
}

template <typename T>
double cp_abs_error(const Tensor<T>& x, const Tensor<T>& m1, const Tensor<T>& m2,
                    const Tensor<T>& m3) {
    const std::size_t r = m1.dim(0);
    const std::size_t d1 = m1.dim(1), d2 = m2.dim(1), d3 = m3.dim(1);
    double err2 = 0.0;
    for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
            for (std::size_t l = 0; l < d3; ++l) {
                double recon = 0.0;
                for (std::size_t q = 0; q < r; ++q)
                    recon += static_cast<double>(m1[q * d1 + i]) *
                             static_cast<double>(m2[q * d2 + j]) *
                             static_cast<double>(m3[q * d3 + l]);
                const double diff = static_cast<double>(x[(i * d2 + j) * d3 + l]) - recon;
                err2 += diff * diff;
            }
    return std::sqrt(err2);
}

// least-squares update of the factor for `mode`, the other two fixed
template <typename T>
void cp_update_mode(const Tensor<T>& x, int mode, Tensor<T>& m1, Tensor<T>& m2, Tensor<T>& m3,
                    double ridge) {
    const std::size_t r = m1.dim(0);
    const std::size_t d1 = m1.dim(1), d2 = m2.dim(1), d3 = m3.dim(1);
    const Tensor<T>& a = (mode == 0) ? m2 : m1;
    const Tensor<T>& b = (mode == 2) ? m2 : m3;
    std::vector<T> g = gram_rows(a);
    {
        const std::vector<T> gb = gram_rows(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gb[i];
    }
    const std::size_t dim = (mode == 0) ? d1 : (mode == 1) ? d2 : d3;
    std::vector<T> rhs(dim * r, T(0));
    // rhs[i, q] = sum over the two fixed modes of x * factor products
    for (std::size_t q = 0; q < r; ++q) {
        for (std::size_t i = 0; i < d1; ++i)
            for (std::size_t j = 0; j < d2; ++j) {
                const T* xrow = x.data() + (i * d2 + j) * d3;
                if (mode == 2) {
                    const T f = m1[q * d1 + i] * m2[q * d2 + j];
                    if (f == T(0)) continue;
                    for (std::size_t l = 0; l < d3; ++l) rhs[l * r + q] += f * xrow[l];
                } else {
                    T dot = 0;
                    for (std::size_t l = 0; l < d3; ++l) dot += xrow[l] * m3[q * d3 + l];
                    if (mode == 0)
                        rhs[i * r + q] += m2[q * d2 + j] * dot;
                    else
                        rhs[j * r + q] += m1[q * d1 + i] * dot;
                }
            }
    }
    cholesky_solve_rows(std::move(g), r, ridge, rhs.data(), dim);
    Tensor<T>& target = (mode == 0) ? m1 : (mode == 1) ? m2 : m3;
    for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t q = 0; q < r; ++q) target[q * dim + i] = rhs[i * r + q];
}

// rescale each rank-1 term's vector in `m` to unit norm; the magnitudes are
// re-absorbed by the next mode's least-squares update
template <typename T>
void normalize_rows(Tensor<T>& m) {
    const std::size_t r = m.dim(0), d = m.dim(1);
    for (std::size_t q = 0; q < r; ++q) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            n2 += static_cast<double>(m[q * d + i]) * static_cast<double>(m[q * d + i]);
        const double n = std::sqrt(n2);
        if (n > 0.0)
            for (std::size_t i = 0; i < d; ++i) m[q * d + i] = static_cast<T>(m[q * d + i] / n);
    }
}

}  // namespace detail

template <typename T>
CpAlsResult<T> cp_als(const Tensor<T>& x, std::size_t rank, const CpAlsOptions& opt = {}) {
    if (x.rank() != 3)
        throw std::invalid_argument("cp_als: input must be 3-D, got " + shape_str(x.shape()));
    if (rank == 0) throw std::invalid_argument("cp_als: rank must be positive");
    const std::size_t d1 = x.dim(0), d2 = x.dim(1), d3 = x.dim(2);
    const double norm_x = x.frobenius_norm();

    CpAlsResult<T> best;
    if (norm_x == 0.0) {
        best.adapter = zero_adapter<T>(d1, d2, d3, rank);
        best.relative_error = 0.0;
        best.sweep_errors = {0.0};
        return best;
    }

    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t restart = 0; restart < opt.restarts; ++restart) {
        Rng rng(mix64(opt.seed, restart));
        Tensor<T> m1({rank, d1}), m2({rank, d2}), m3({rank, d3});
        for (std::size_t i = 0; i < m1.numel(); ++i) m1[i] = static_cast<T>(rng.normal());
        for (std::size_t i = 0; i < m2.numel(); ++i) m2[i] = static_cast<T>(rng.normal());
        for (std::size_t i = 0; i < m3.numel(); ++i) m3[i] = static_cast<T>(rng.normal());

        double prev = detail::cp_abs_error(x, m1, m2, m3) / norm_x;
        std::vector<double> errs{prev};
        for (std::size_t sweep = 0; sweep < opt.max_sweeps; ++sweep) {
            Tensor<T> s1 = m1, s2 = m2, s3 = m3;
            detail::cp_update_mode(x, 0, m1, m2, m3, opt.ridge);
            detail::normalize_rows(m1);
            detail::cp_update_mode(x, 1, m1, m2, m3, opt.ridge);
            detail::normalize_rows(m2);
            detail::cp_update_mode(x, 2, m1, m2, m3, opt.ridge);
            const double err = detail::cp_abs_error(x, m1, m2, m3) / norm_x;
            if (err > prev) {
                // numerical uptick; keep the last good factors
                m1 = std::move(s1);
                m2 = std::move(s2);
                m3 = std::move(s3);
                break;
            }
            errs.push_back(err);
            const double gain = prev - err;
            prev = err;
            if (gain < opt.tol) break;
        }
        if (prev < best_err) {
            best_err = prev;
            best.adapter = CpAdapter<T>(Variable<T>(std::move(m1)), Variable<T>(std::move(m2)),
                                        Variable<T>(std::move(m3)), T(1));
            best.relative_error = prev;
            best.sweep_errors = std::move(errs);
        }
    }
    return best;
}

// ------------------------------------------------------------------ TT-SVD

template <typename T>
struct TtResult {
    std::vector<Tensor<T>> cores;  // core k is [r_{k-1}, I_k, r_k]; r_0 = r_last = 1
    std::vector<double> deltas;    // discarded singular energy at each split
    double error;                  // Frobenius error of the construction: sqrt(sum deltas^2)
};

template <typename T>
TtResult<T> tt_svd(const Tensor<T>& t, const std::vector<std::size_t>& max_ranks) {
    const std::size_t n_dims = t.rank();
    if (n_dims < 2)
        throw std::invalid_argument("tt_svd: input must have at least 2 dims, got " +
                                    shape_str(t.shape()));
    if (max_ranks.size() != n_dims - 1)
        throw std::invalid_argument("tt_svd: need " + std::to_string(n_dims - 1) +
                                    " internal ranks, got " + std::to_string(max_ranks.size()));
    for (std::size_t r : max_ranks)
        if (r == 0) throw std::invalid_argument("tt_svd: ranks must be positive");

    TtResult<T> out;
    Tensor<T> c = t;  // progressively reshaped remainder
    std::size_t r_prev = 1;
    std::size_t tail = t.numel();
    for (std::size_t k = 0; k + 1 < n_dims; ++k) {
        const std::size_t dim_k = t.dim(k);
        const std::size_t rows = r_prev * dim_k;
        const std::size_t cols = tail / dim_k;
        Tensor<T> mat = c.reshaped({rows, cols});
        SvdResult<T> s = svd(mat);
        const std::size_t full = std::min(rows, cols);
        const std::size_t r_k = std::min(max_ranks[k], full);
        double discarded = 0.0;
        for (std::size_t i = r_k; i < full; ++i)
            discarded += static_cast<double>(s.sigma[i]) * static_cast<double>(s.sigma[i]);
        out.deltas.push_back(std::sqrt(discarded));

        Tensor<T> core({r_prev, dim_k, r_k});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < r_k; ++j) core[i * r_k + j] = s.u[i * full + j];
        out.cores.push_back(std::move(core));

        Tensor<T> next({r_k, cols});
        for (std::size_t i = 0; i < r_k; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                next[i * cols + j] = s.sigma[i] * s.v[j * full + i];
        c = std::move(next);
        r_prev = r_k;
        tail = cols;
    }
    out.cores.push_back(c.reshaped({r_prev, t.dim(n_dims - 1), 1}));
    double err2 = 0.0;
    for (double d : out.deltas) err2 += d * d;
    out.error = std::sqrt(err2);
    return out;
}

template <typename T>
Tensor<T> tt_reconstruct(const std::vector<Tensor<T>>& cores) {
    if (cores.empty()) throw std::invalid_argument("tt_reconstruct: no cores");
    Shape dims;
    for (const auto& c : cores) dims.push_back(c.dim(1));
    // acc is [prod(dims so far), r_k]
    Tensor<T> acc = cores[0].reshaped({cores[0].dim(1), cores[0].dim(2)});
    for (std::size_t k = 1; k < cores.size(); ++k) {
        const Tensor<T>& core = cores[k];
        const std::size_t left = acc.dim(0), r_in = acc.dim(1);
        const std::size_t dim_k = core.dim(1), r_out = core.dim(2);
        if (core.dim(0) != r_in)
            throw std::invalid_argument("tt_reconstruct: core " + std::to_string(k) +
                                        " rank mismatch");
        Tensor<T> next({left * dim_k, r_out});
        for (std::size_t p = 0; p < left; ++p)
            for (std::size_t i = 0; i < dim_k; ++i)
                for (std::size_t ro = 0; ro < r_out; ++ro) {
                    T accv = 0;
                    for (std::size_t ri = 0; ri < r_in; ++ri)
                        accv += acc[p * r_in + ri] * core[(ri * dim_k + i) * r_out + ro];
                    next[(p * dim_k + i) * r_out + ro] = accv;
                }
        acc = std::move(next);
    }
    return acc.reshaped(dims);
}

template <typename T>
std::size_t tt_param_count(const std::vector<Tensor<T>>& cores) {
    std::size_t total = 0;
    for (const auto& c : cores) total += c.numel();
    return total;
}

// ------------------------------------------------------------------ reports

struct FactorizationRow {
    std::string layer;
    std::string method;  // cp | tt | svd
    std::size_t rank = 0;
    double abs_error = 0.0;
    double rel_error = 0.0;
    std::size_t param_count = 0;
};

struct FactorizationAggregate {
    double mean_rel_error = 0.0;
    double std_rel_error = 0.0;  // population std over rows
};

inline FactorizationAggregate aggregate_rows(const std::vector<FactorizationRow>& rows) {
    FactorizationAggregate agg;
    if (rows.empty()) return agg;
    double mean = 0.0;
    for (const auto& r : rows) mean += r.rel_error;
    mean /= static_cast<double>(rows.size());
    double var = 0.0;
    for (const auto& r : rows) var += (r.rel_error - mean) * (r.rel_error - mean);
    var /= static_cast<double>(rows.size());
    agg.mean_rel_error = mean;
    agg.std_rel_error = std::sqrt(var);
    return agg;
}

// one factorization of one 3-way delta, as a report row
template <typename T>
FactorizationRow factorize_tensor(const std::string& layer, const Tensor<T>& t3,
                                  const std::string& method, std::size_t rank,
                                  std::uint64_t seed = 0) {
    if (t3.rank() != 3)
        throw std::invalid_argument("factorize_tensor: expected a 3-way tensor, got " +
                                    shape_str(t3.shape()));
    FactorizationRow row;
    row.layer = layer;
    row.method = method;
    row.rank = rank;
    const double norm = t3.frobenius_norm();
    if (method == "cp") {
        CpAlsOptions opt;
        opt.seed = seed;
        const CpAlsResult<T> res = cp_als(t3, rank, opt);
        row.rel_error = res.relative_error;
        row.abs_error = res.relative_error * norm;
        row.param_count = res.adapter.param_count();
    } else if (method == "tt") {
        const TtResult<T> res = tt_svd(t3, {rank, rank});
        row.abs_error = res.error;
        row.rel_error = norm > 0.0 ? res.error / norm : 0.0;
        row.param_count = tt_param_count(res.cores);
    } else if (method == "svd") {
        const Tensor<T> mat = t3.reshaped({t3.dim(0) * t3.dim(1), t3.dim(2)});
        const std::size_t full = std::min(mat.dim(0), mat.dim(1));
        const TruncatedSvd<T> res = truncated_svd(mat, std::min(rank, full));
        row.abs_error = res.error;
        row.rel_error = norm > 0.0 ? res.error / norm : 0.0;
        row.param_count = std::min(rank, full) * (mat.dim(0) + mat.dim(1));
    } else {
        throw std::invalid_argument("factorize_tensor: unknown method '" + method + "'");
    }
    return row;
}

}  // namespace ftn
