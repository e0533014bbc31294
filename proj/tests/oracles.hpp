#pragma once

// Reference implementations the tests check library kernels against.
// Everything here is a direct transcription of the defining formula,
// written independently of the library loops: padding is materialized,
// index arithmetic goes through Tensor::at, no reordering or skipping.

#include <cmath>
#include <cstddef>
#include <vector>

#include "ftn/tensor.hpp"

namespace oracle {

using ftn::Shape;
using ftn::Tensor;

inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<double> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < k; ++q) acc += a.at({i, q}) * b.at({q, j});
            out.at({i, j}) = acc;
        }
    }
    return out;
}

inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w,
                             std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t c_out = w.dim(0), k = w.dim(2);
    const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad;
    Tensor<double> padded({n, c_in, hp, wp});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < wd; ++j)
                    padded.at({b, c, i + pad, j + pad}) = x.at({b, c, i, j});
    const std::size_t ho = (hp - k) / stride + 1, wo = (wp - k) / stride + 1;
    Tensor<double> out({n, c_out, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < c_out; ++co)
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < c_in; ++ci)
                        for (std::size_t kh = 0; kh < k; ++kh)
                            for (std::size_t kw = 0; kw < k; ++kw)
                                acc += padded.at({b, ci, i * stride + kh, j * stride + kw}) *
                                       w.at({co, ci, kh, kw});
                    out.at({b, co, i, j}) = acc;
                }
    return out;
}

// odometer over all multi-indices with one axis pinned out, then the plain
// exp/sum quotient along that axis
inline Tensor<double> softmax(const Tensor<double>& x, std::size_t axis) {
    const Shape& sh = x.shape();
    Tensor<double> out(sh);
    std::vector<std::size_t> idx(sh.size(), 0);
    const auto offset_of = [&](const std::vector<std::size_t>& ix) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < sh.size(); ++d) off = off * sh[d] + ix[d];
        return off;
    };
    const auto advance_skipping_axis = [&]() {
        for (std::size_t d = sh.size(); d-- > 0;) {
            if (d == axis) continue;
            if (++idx[d] < sh[d]) return true;
            idx[d] = 0;
        }
        return false;
    };
    do {
        double denom = 0.0;
        for (idx[axis] = 0; idx[axis] < sh[axis]; ++idx[axis])
            denom += std::exp(x[offset_of(idx)]);
        for (idx[axis] = 0; idx[axis] < sh[axis]; ++idx[axis])
            out[offset_of(idx)] = std::exp(x[offset_of(idx)]) / denom;
        idx[axis] = 0;
    } while (advance_skipping_axis());
    return out;
}

inline Tensor<double> cp_reconstruct(const Tensor<double>& m1, const Tensor<double>& m2,
                                     const Tensor<double>& m3, double scale) {
    const std::size_t r = m1.dim(0);
    const std::size_t d1 = m1.dim(1), d2 = m2.dim(1), d3 = m3.dim(1);
    Tensor<double> out({d1, d2, d3});
    for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j)
            for (std::size_t l = 0; l < d3; ++l) {
                double acc = 0.0;
                for (std::size_t q = 0; q < r; ++q)
                    acc += m1.at({q, i}) * m2.at({q, j}) * m3.at({q, l});
                out.at({i, j, l}) = scale * acc;
            }
    return out;
}

// per-channel statistics over the N,H,W axes of a [N,C,H,W] tensor;
// variance is the biased (divide by count) form
inline void channel_stats(const Tensor<double>& x, std::vector<double>& mean,
                          std::vector<double>& var) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const double count = static_cast<double>(n * h * w);
    mean.assign(c, 0.0);
    var.assign(c, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) mean[ch] += x.at({b, ch, i, j});
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= count;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const double d = x.at({b, ch, i, j}) - mean[ch];
                    var[ch] += d * d;
                }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= count;
}

inline Tensor<double> batchnorm(const Tensor<double>& x, const Tensor<double>& gamma,
                                const Tensor<double>& beta, const std::vector<double>& mean,
                                const std::vector<double>& var, double eps) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<double> out(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    out.at({b, ch, i, j}) =
                        gamma[ch] * (x.at({b, ch, i, j}) - mean[ch]) / std::sqrt(var[ch] + eps) +
                        beta[ch];
    return out;
}

// one scaled-dot-product attention head at a time, heads combined through the
// [d_model, d, n] output projection; asserts every attention row sums to 1
inline Tensor<double> mhsa(const Tensor<double>& x, const Tensor<double>& wq,
                           const Tensor<double>& wk, const Tensor<double>& wv,
                           const Tensor<double>& wo) {
    const std::size_t s = x.dim(0), d_model = x.dim(1);
    const std::size_t d = wq.dim(1), heads = wq.dim(2);
    Tensor<double> out({s, d_model});
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const auto slice = [&](const Tensor<double>& w3) {
            Tensor<double> m({d_model, d});
            for (std::size_t a = 0; a < d_model; ++a)
                for (std::size_t b = 0; b < d; ++b) m.at({a, b}) = w3.at({a, b, hd});
            return m;
        };
        const Tensor<double> q = matmul(x, slice(wq));
        const Tensor<double> k = matmul(x, slice(wk));
        const Tensor<double> v = matmul(x, slice(wv));
        Tensor<double> scores({s, s});
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (std::size_t a = 0; a < d; ++a) acc += q.at({i, a}) * k.at({j, a});
                scores.at({i, j}) = acc / std::sqrt(static_cast<double>(d));
            }
        const Tensor<double> attn = softmax(scores, 1);
        for (std::size_t i = 0; i < s; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < s; ++j) row += attn.at({i, j});
            if (std::abs(row - 1.0) > 1e-6) throw std::logic_error("attention row sum");
        }
        const Tensor<double> head = matmul(attn, v);
        const Tensor<double> wo_h = slice(wo);
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t m = 0; m < d_model; ++m) {
                double acc = 0.0;
                for (std::size_t a = 0; a < d; ++a) acc += head.at({i, a}) * wo_h.at({m, a});
                out.at({i, m}) += acc;
            }
    }
    return out;
}

inline double cross_entropy(const Tensor<double>& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(logits.at({i, j}));
        total += std::log(denom) - logits.at({i, static_cast<std::size_t>(labels[i])});
    }
    return total / static_cast<double>(n);
}

}  // namespace oracle
