#pragma once

// Network layers built on top of the adapter primitives: task-conditional
// batch normalization, the adapted convolution block (conv with a CP delta
// folded into the weight, followed by BN), and multi-head self-attention
// with optional query/value or output-projection adapters.
//
// Batch norm semantics, pinned here because conventions differ between
// frameworks:
//   - batch statistics use the biased variance (divide by N*H*W),
//   - running statistics are EMAs of those same biased statistics with
//     update running = (1-momentum)*running + momentum*batch,
//   - train mode normalizes with batch statistics and updates the running
//     buffers as a side effect; eval mode reads the buffers and never
//     writes them.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "ftn/adapters.hpp"
#include "ftn/autograd.hpp"
#include "ftn/ops.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

enum class BnMode { kTrain, kEval };

template <typename T>
struct BatchNormParams {
    Variable<T> gamma;       // [C], trainable
    Variable<T> beta;        // [C], trainable
    Tensor<T> running_mean;  // [C], buffer
    Tensor<T> running_var;   // [C], buffer
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    std::size_t channels() const { return gamma.value().dim(0); }

    void validate() const {
        detail::require(gamma.defined() && beta.defined(), "batchnorm: gamma/beta undefined");
        detail::require(gamma.value().rank() == 1 && beta.value().rank() == 1 &&
                            running_mean.rank() == 1 && running_var.rank() == 1,
                        "batchnorm: params must be 1-D vectors");
        const std::size_t c = gamma.value().dim(0);
        detail::require(beta.value().dim(0) == c && running_mean.dim(0) == c &&
                            running_var.dim(0) == c,
                        "batchnorm: param vectors disagree on channel count");
        detail::require(epsilon > T(0), "batchnorm: epsilon must be positive");
        detail::require(momentum > T(0) && momentum < T(1), "batchnorm: momentum outside (0,1)");
        for (std::size_t i = 0; i < c; ++i)
            detail::require(running_var[i] >= T(0), "batchnorm: negative running variance");
    }
};

template <typename T>
BatchNormParams<T> make_batchnorm_params(std::size_t channels, bool trainable = true) {
    BatchNormParams<T> p;
    p.gamma = Variable<T>(Tensor<T>::full({channels}, T(1)), trainable);
    p.beta = Variable<T>(Tensor<T>({channels}), trainable);
    p.running_mean = Tensor<T>({channels});
    p.running_var = Tensor<T>::full({channels}, T(1));
    return p;
}

// copy used when a new task clones the backbone's BN state: fresh trainable
// gamma/beta leaves, running buffers copied by value
template <typename T>
BatchNormParams<T> clone_batchnorm_params(const BatchNormParams<T>& src, bool trainable = true) {
    BatchNormParams<T> p;
    p.gamma = Variable<T>(src.gamma.value(), trainable);
    p.beta = Variable<T>(src.beta.value(), trainable);
    p.running_mean = src.running_mean;
    p.running_var = src.running_var;
    p.epsilon = src.epsilon;
    p.momentum = src.momentum;
    return p;
}

namespace detail {

template <typename T>
void per_channel_stats(const Tensor<T>& x, std::vector<T>& mean, std::vector<T>& var) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const T count = static_cast<T>(n * hw);
    mean.assign(c, T(0));
    var.assign(c, T(0));
    const T* px = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* run = px + (b * c + ch) * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += run[i];
            mean[ch] += acc;
        }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= count;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* run = px + (b * c + ch) * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) {
                const T d = run[i] - mean[ch];
                acc += d * d;
            }
            var[ch] += acc;
        }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= count;
}

}  // namespace detail

template <typename T>
Variable<T> batchnorm_forward(const Variable<T>& x, BatchNormParams<T>& p, BnMode mode) {
    p.validate();
    const Tensor<T>& xv = x.value();
    detail::require(xv.rank() == 4,
                    "batchnorm: input must be 4-D [N,C,H,W], got " + shape_str(xv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    detail::require(c == p.channels(), "batchnorm: input has " + std::to_string(c) +
                                           " channels, params have " +
                                           std::to_string(p.channels()));
    const bool train = mode == BnMode::kTrain;
    if (train)
        detail::require(n * hw >= 2, "batchnorm: train mode needs at least 2 values per channel");

    std::vector<T> mean(c), var(c);
    if (train) {
        detail::per_channel_stats(xv, mean, var);
        for (std::size_t ch = 0; ch < c; ++ch) {
            p.running_mean[ch] = (T(1) - p.momentum) * p.running_mean[ch] + p.momentum * mean[ch];
            p.running_var[ch] = (T(1) - p.momentum) * p.running_var[ch] + p.momentum * var[ch];
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = p.running_mean[ch];
            var[ch] = p.running_var[ch];
        }
    }
    std::vector<T> inv(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = T(1) / std::sqrt(var[ch] + p.epsilon);

    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    {
        const T* px = xv.data();
        const T* pg = p.gamma.value().data();
        const T* pb = p.beta.value().data();
        T* ph = xhat.data();
        T* po = out.data();
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T h = (px[base + i] - mean[ch]) * inv[ch];
                    ph[base + i] = h;
                    po[base + i] = pg[ch] * h + pb[ch];
                }
            }
    }

    return detail::make_op<T>(
        "batchnorm", std::move(out), {x.node(), p.gamma.node(), p.beta.node()},
        [xhat = std::move(xhat), inv = std::move(inv), train, n, c, hw](Node<T>& nd) {
            const T* ph = xhat.data();
            const T* pg = nd.grad.data();
            const bool need_dx = nd.inputs[0]->requires_grad;
            const bool need_dg = nd.inputs[1]->requires_grad;
            const bool need_db = nd.inputs[2]->requires_grad;
            // channel reductions of g and g*xhat feed all three gradients
            std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (b * c + ch) * hw;
                    T sg = 0, sgh = 0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sg += pg[base + i];
                        sgh += pg[base + i] * ph[base + i];
                    }
                    sum_g[ch] += sg;
                    sum_gh[ch] += sgh;
                }
            if (need_db) {
                Tensor<T>& buf = nd.inputs[2]->grad_buffer();
                for (std::size_t ch = 0; ch < c; ++ch) buf[ch] += sum_g[ch];
            }
            if (need_dg) {
                Tensor<T>& buf = nd.inputs[1]->grad_buffer();
                for (std::size_t ch = 0; ch < c; ++ch) buf[ch] += sum_gh[ch];
            }
            if (need_dx) {
                const T* pgam = nd.inputs[1]->value.data();
                Tensor<T>& buf = nd.inputs[0]->grad_buffer();
                const T count = static_cast<T>(n * hw);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (b * c + ch) * hw;
                        const T k = pgam[ch] * inv[ch];
                        if (train) {
                            const T mg = sum_g[ch] / count;
                            const T mgh = sum_gh[ch] / count;
                            for (std::size_t i = 0; i < hw; ++i)
                                buf[base + i] += k * (pg[base + i] - mg - ph[base + i] * mgh);
                        } else {
                            for (std::size_t i = 0; i < hw; ++i) buf[base + i] += k * pg[base + i];
                        }
                    }
            }
        });
}

// Eq-style conv block: convolution with the adapter delta folded into the
// weight, then task batch norm. The nonlinearity is the caller's business.
template <typename T>
Variable<T> adapted_conv_block(const Variable<T>& x, const Variable<T>& weight,
                               const CpAdapter<T>& adapter, BatchNormParams<T>& bn, BnMode mode,
                               std::size_t stride = 1, std::size_t padding = 0) {
    return batchnorm_forward(conv2d(x, apply_conv(weight, adapter), stride, padding), bn, mode);
}

// ---- multi-head self-attention ----

template <typename T>
struct MhsaWeights {
    // each projection viewable as [d_model, d_head, n_heads]
    Variable<T> wq, wk, wv, wo;

    std::size_t d_model() const { return wq.value().dim(0); }
    std::size_t d_head() const { return wq.value().dim(1); }
    std::size_t n_heads() const { return wq.value().dim(2); }

    void validate() const {
        detail::require(wq.defined() && wk.defined() && wv.defined() && wo.defined(),
                        "mhsa: projection weights undefined");
        const Shape& sh = wq.value().shape();
        detail::require(sh.size() == 3, "mhsa: projections must be 3-D [d_model,d,n]");
        detail::require(wk.value().same_shape(sh) && wv.value().same_shape(sh) &&
                            wo.value().same_shape(sh),
                        "mhsa: projection shapes disagree");
        detail::require(sh[1] * sh[2] == sh[0], "mhsa: d_head * n_heads must equal d_model");
    }
};

template <typename T>
MhsaWeights<T> make_mhsa_weights(std::size_t d_model, std::size_t n_heads, std::uint64_t seed,
                                 bool trainable = true) {
    detail::require(n_heads >= 1 && d_model % n_heads == 0,
                    "mhsa: d_model must be divisible by n_heads");
    const std::size_t d = d_model / n_heads;
    Rng rng(seed);
    const T bound = std::sqrt(T(3)) / std::sqrt(static_cast<T>(d_model));
    const auto draw = [&] {
        Tensor<T> t({d_model, d, n_heads});
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(rng.uniform(-static_cast<double>(bound), bound));
        return Variable<T>(std::move(t), trainable);
    };
    MhsaWeights<T> w;
    w.wq = draw();
    w.wk = draw();
    w.wv = draw();
    w.wo = draw();
    return w;
}

// Self-attention over x [S, d_model] with Q = K = V = x. Adapters, when
// present, are added to the corresponding projection tensors before use:
// either q_adapter+v_adapter together, or o_adapter alone, never both
// variants at once. Pass nullptr for absent adapters.
template <typename T>
Variable<T> mhsa_forward(const Variable<T>& x, const MhsaWeights<T>& w,
                         std::type_identity_t<const CpAdapter<T>*> q_adapter = nullptr,
                         std::type_identity_t<const CpAdapter<T>*> v_adapter = nullptr,
                         std::type_identity_t<const CpAdapter<T>*> o_adapter = nullptr) {
    w.validate();
    detail::require((q_adapter == nullptr) == (v_adapter == nullptr),
                    "mhsa: query and value adapters must be supplied together");
    detail::require(!(q_adapter != nullptr && o_adapter != nullptr),
                    "mhsa: query/value and output adapters are mutually exclusive");
    detail::require(x.value().rank() == 2, "mhsa: input must be 2-D [S,d_model], got " +
                                               shape_str(x.value().shape()));
    detail::require(x.value().dim(1) == w.d_model(),
                    "mhsa: input width " + std::to_string(x.value().dim(1)) +
                        " does not match d_model " + std::to_string(w.d_model()));

    const Variable<T> wq = q_adapter ? apply_attn(w.wq, *q_adapter) : w.wq;
    const Variable<T> wv = v_adapter ? apply_attn(w.wv, *v_adapter) : w.wv;
    const Variable<T> wo = o_adapter ? apply_attn(w.wo, *o_adapter) : w.wo;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(w.d_head()));

    Variable<T> out;
    for (std::size_t h = 0; h < w.n_heads(); ++h) {
        const Variable<T> q = matmul(x, select_last(wq, h));
        const Variable<T> k = matmul(x, select_last(w.wk, h));
        const Variable<T> v = matmul(x, select_last(wv, h));
        const Variable<T> attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
        const Variable<T> head = matmul(attn, v);
        const Variable<T> proj = matmul(head, transpose(select_last(wo, h)));
        out = h == 0 ? proj : add(out, proj);
    }
    return out;
}

}  // namespace ftn
