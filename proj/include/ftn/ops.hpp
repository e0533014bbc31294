#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ftn/autograd.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

namespace detail {

template <typename T>
Variable<T> make_op(const char* name, Tensor<T> value, std::vector<NodePtr<T>> inputs,
                    std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->op = name;
    for (const auto& in : n->inputs) {
        if (in && in->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Variable<T>(n);
}

template <typename T>
void accumulate(Node<T>& dst, const Tensor<T>& g) {
    dst.grad_buffer() += g;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// ---- kernels (plain tensor math, shared by forward and backward) ----

template <typename T>
Tensor<T> mm_nn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            const T av = pa[i * K + k];
            const T* brow = pb + k * N;
            T* orow = po + i * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// a [M,K] * b^T where b is [N,K]
template <typename T>
Tensor<T> mm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    Tensor<T> out({M, N});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            const T* arow = pa + i * K;
            const T* brow = pb + j * K;
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            po[i * N + j] = acc;
        }
    }
    return out;
}

// a^T * b where a is [K,M], b is [K,N]
template <typename T>
Tensor<T> mm_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t K = a.dim(0), M = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t k = 0; k < K; ++k) {
        const T* arow = pa + k * M;
        const T* brow = pb + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T av = arow[i];
            T* orow = po + i * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

struct Conv2dDims {
    std::size_t batch, c_in, h, w, c_out, k, h_out, w_out;
    std::size_t stride, padding;
};

template <typename T>
Conv2dDims conv2d_dims(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                       std::size_t padding) {
    require(x.rank() == 4, "conv2d: input must be 4-D [N,C,H,W], got " + shape_str(x.shape()));
    require(w.rank() == 4,
            "conv2d: weight must be 4-D [C_out,C_in,k,k], got " + shape_str(w.shape()));
    require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " +
                                      std::to_string(w.dim(2)) + "x" + std::to_string(w.dim(3)));
    require(x.dim(1) == w.dim(1), "conv2d: input channels " + std::to_string(x.dim(1)) +
                                      " do not match weight C_in " + std::to_string(w.dim(1)));
    require(stride >= 1, "conv2d: stride must be positive");
    Conv2dDims d;
    d.batch = x.dim(0);
    d.c_in = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.c_out = w.dim(0);
    d.k = w.dim(2);
    d.stride = stride;
    d.padding = padding;
    const auto out_extent = [&](std::size_t in, const char* axis) {
        const std::ptrdiff_t span =
            static_cast<std::ptrdiff_t>(in) + 2 * static_cast<std::ptrdiff_t>(padding) -
            static_cast<std::ptrdiff_t>(d.k);
        require(span >= 0 && span % static_cast<std::ptrdiff_t>(stride) == 0,
                std::string("conv2d: output ") + axis + " extent (" + std::to_string(in) +
                    " + 2*" + std::to_string(padding) + " - " + std::to_string(d.k) + ")/" +
                    std::to_string(stride) + " + 1 is not a positive integer");
        return static_cast<std::size_t>(span / static_cast<std::ptrdiff_t>(stride)) + 1;
    };
    d.h_out = out_extent(d.h, "height");
    d.w_out = out_extent(d.w, "width");
    return d;
}

template <typename T>
Tensor<T> conv2d_kernel(const Tensor<T>& x, const Tensor<T>& w, const Conv2dDims& d) {
    Tensor<T> out({d.batch, d.c_out, d.h_out, d.w_out});
    const T* px = x.data();
    const T* pw = w.data();
    T* po = out.data();
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(d.padding);
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(d.stride);
    for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t co = 0; co < d.c_out; ++co) {
            T* out_plane = po + (n * d.c_out + co) * d.h_out * d.w_out;
            for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                const T* in_plane = px + (n * d.c_in + ci) * d.h * d.w;
                const T* w_plane = pw + (co * d.c_in + ci) * d.k * d.k;
                for (std::size_t kh = 0; kh < d.k; ++kh) {
                    for (std::size_t kw = 0; kw < d.k; ++kw) {
                        const T wv = w_plane[kh * d.k + kw];
                        if (wv == T(0)) continue;
                        for (std::size_t ho = 0; ho < d.h_out; ++ho) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(ho) * s +
                                                      static_cast<std::ptrdiff_t>(kh) - p;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
                            const T* in_row = in_plane + ih * d.w;
                            T* out_row = out_plane + ho * d.w_out;
                            for (std::size_t wo = 0; wo < d.w_out; ++wo) {
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(wo) * s +
                                                          static_cast<std::ptrdiff_t>(kw) - p;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
                                out_row[wo] += wv * in_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace detail

// ---- elementwise and linear algebra ----

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b) {
    detail::require(a.value().same_shape(b.value()),
                    "add: shape " + shape_str(a.value().shape()) + " vs " +
                        shape_str(b.value().shape()));
    Tensor<T> out = a.value();
    out += b.value();
    return detail::make_op<T>("add", std::move(out), {a.node(), b.node()}, [](Node<T>& n) {
        for (int i = 0; i < 2; ++i) {
            if (n.inputs[i]->requires_grad) detail::accumulate(*n.inputs[i], n.grad);
        }
    });
}

template <typename T>
Variable<T> sub(const Variable<T>& a, const Variable<T>& b) {
    detail::require(a.value().same_shape(b.value()),
                    "sub: shape " + shape_str(a.value().shape()) + " vs " +
                        shape_str(b.value().shape()));
    Tensor<T> out = a.value();
    out -= b.value();
    return detail::make_op<T>("sub", std::move(out), {a.node(), b.node()}, [](Node<T>& n) {
        if (n.inputs[0]->requires_grad) detail::accumulate(*n.inputs[0], n.grad);
        if (n.inputs[1]->requires_grad) {
            Tensor<T>& buf = n.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] -= n.grad[i];
        }
    });
}

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b) {
    detail::require(a.value().same_shape(b.value()),
                    "mul: shape " + shape_str(a.value().shape()) + " vs " +
                        shape_str(b.value().shape()));
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_op<T>("mul", std::move(out), {a.node(), b.node()}, [](Node<T>& n) {
        const Tensor<T>& av = n.inputs[0]->value;
        const Tensor<T>& bv = n.inputs[1]->value;
        if (n.inputs[0]->requires_grad) {
            Tensor<T>& buf = n.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += n.grad[i] * bv[i];
        }
        if (n.inputs[1]->requires_grad) {
            Tensor<T>& buf = n.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Variable<T> scale(const Variable<T>& a, T c) {
    Tensor<T> out = a.value();
    out *= c;
    return detail::make_op<T>("scale", std::move(out), {a.node()}, [c](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += c * n.grad[i];
    });
}

template <typename T>
Variable<T> matmul(const Variable<T>& a, const Variable<T>& b) {
    detail::require(a.value().rank() == 2 && b.value().rank() == 2,
                    "matmul: both operands must be 2-D, got " + shape_str(a.value().shape()) +
                        " and " + shape_str(b.value().shape()));
    detail::require(a.value().dim(1) == b.value().dim(0),
                    "matmul: inner dimensions disagree, " + shape_str(a.value().shape()) +
                        " * " + shape_str(b.value().shape()));
    return detail::make_op<T>("matmul", detail::mm_nn(a.value(), b.value()),
                              {a.node(), b.node()}, [](Node<T>& n) {
                                  const Tensor<T>& av = n.inputs[0]->value;
                                  const Tensor<T>& bv = n.inputs[1]->value;
                                  if (n.inputs[0]->requires_grad)
                                      detail::accumulate(*n.inputs[0], detail::mm_nt(n.grad, bv));
                                  if (n.inputs[1]->requires_grad)
                                      detail::accumulate(*n.inputs[1], detail::mm_tn(av, n.grad));
                              });
}

template <typename T>
Variable<T> transpose(const Variable<T>& a) {
    detail::require(a.value().rank() == 2,
                    "transpose: operand must be 2-D, got " + shape_str(a.value().shape()));
    const std::size_t M = a.value().dim(0), N = a.value().dim(1);
    Tensor<T> out({N, M});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) out[j * M + i] = a.value()[i * N + j];
    return detail::make_op<T>("transpose", std::move(out), {a.node()}, [M, N](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j) buf[i * N + j] += n.grad[j * M + i];
    });
}

// ---- convolution ----

template <typename T>
Variable<T> conv2d(const Variable<T>& x, const Variable<T>& w, std::size_t stride = 1,
                   std::size_t padding = 0) {
    const detail::Conv2dDims d = detail::conv2d_dims(x.value(), w.value(), stride, padding);
    Tensor<T> out = detail::conv2d_kernel(x.value(), w.value(), d);
    return detail::make_op<T>("conv2d", std::move(out), {x.node(), w.node()}, [d](Node<T>& n) {
        const Tensor<T>& xv = n.inputs[0]->value;
        const Tensor<T>& wv = n.inputs[1]->value;
        const T* pg = n.grad.data();
        const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(d.padding);
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(d.stride);
        const bool need_dx = n.inputs[0]->requires_grad;
        const bool need_dw = n.inputs[1]->requires_grad;
        T* pdx = need_dx ? n.inputs[0]->grad_buffer().data() : nullptr;
        T* pdw = need_dw ? n.inputs[1]->grad_buffer().data() : nullptr;
        for (std::size_t n_i = 0; n_i < d.batch; ++n_i) {
            for (std::size_t co = 0; co < d.c_out; ++co) {
                const T* g_plane = pg + (n_i * d.c_out + co) * d.h_out * d.w_out;
                for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                    const T* x_plane = xv.data() + (n_i * d.c_in + ci) * d.h * d.w;
                    const T* w_plane = wv.data() + (co * d.c_in + ci) * d.k * d.k;
                    T* dx_plane = need_dx ? pdx + (n_i * d.c_in + ci) * d.h * d.w : nullptr;
                    T* dw_plane = need_dw ? pdw + (co * d.c_in + ci) * d.k * d.k : nullptr;
                    for (std::size_t kh = 0; kh < d.k; ++kh) {
                        for (std::size_t kw = 0; kw < d.k; ++kw) {
                            const T wval = w_plane[kh * d.k + kw];
                            T dw_acc = 0;
                            for (std::size_t ho = 0; ho < d.h_out; ++ho) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(ho) * s +
                                                          static_cast<std::ptrdiff_t>(kh) - p;
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
                                const T* g_row = g_plane + ho * d.w_out;
                                const T* x_row = x_plane + ih * d.w;
                                T* dx_row = need_dx ? dx_plane + ih * d.w : nullptr;
                                for (std::size_t wo = 0; wo < d.w_out; ++wo) {
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(wo) * s +
                                        static_cast<std::ptrdiff_t>(kw) - p;
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w))
                                        continue;
                                    const T gv = g_row[wo];
                                    if (need_dx) dx_row[iw] += gv * wval;
                                    if (need_dw) dw_acc += gv * x_row[iw];
                                }
                            }
                            if (need_dw) dw_plane[kh * d.k + kw] += dw_acc;
                        }
                    }
                }
            }
        }
    });
}

// ---- nonlinearities and reductions ----

template <typename T>
Variable<T> relu(const Variable<T>& x) {
    Tensor<T> out(x.value().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
    return detail::make_op<T>("relu", std::move(out), {x.node()}, [](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        const Tensor<T>& xv = n.inputs[0]->value;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < buf.numel(); ++i) {
            if (xv[i] > T(0)) buf[i] += n.grad[i];
        }
    });
}

// numerically stable softmax along one axis
template <typename T>
Variable<T> softmax(const Variable<T>& x, std::size_t axis) {
    const Shape& sh = x.value().shape();
    detail::require(axis < sh.size(), "softmax: axis " + std::to_string(axis) +
                                          " out of range for shape " + shape_str(sh));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    const std::size_t n_axis = sh[axis];

    Tensor<T> out(sh);
    const T* px = x.value().data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n_axis * inner + in;
            T mx = px[base];
            for (std::size_t a = 1; a < n_axis; ++a) mx = std::max(mx, px[base + a * inner]);
            T total = 0;
            for (std::size_t a = 0; a < n_axis; ++a) {
                const T e = std::exp(px[base + a * inner] - mx);
                po[base + a * inner] = e;
                total += e;
            }
            for (std::size_t a = 0; a < n_axis; ++a) po[base + a * inner] /= total;
        }
    }
    return detail::make_op<T>(
        "softmax", std::move(out), {x.node()}, [outer, inner, n_axis](Node<T>& n) {
            if (!n.inputs[0]->requires_grad) return;
            const T* y = n.value.data();
            const T* g = n.grad.data();
            Tensor<T>& buf = n.inputs[0]->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n_axis * inner + in;
                    T dot = 0;
                    for (std::size_t a = 0; a < n_axis; ++a)
                        dot += g[base + a * inner] * y[base + a * inner];
                    for (std::size_t a = 0; a < n_axis; ++a) {
                        const std::size_t idx = base + a * inner;
                        buf[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

template <typename T>
Variable<T> sum(const Variable<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(x.value().sum());
    return detail::make_op<T>("sum", std::move(out), {x.node()}, [](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        const T g = n.grad[0];
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += g;
    });
}

// global average pool: [N,C,H,W] -> [N,C]
template <typename T>
Variable<T> mean_spatial(const Variable<T>& x) {
    detail::require(x.value().rank() == 4,
                    "mean_spatial: input must be 4-D, got " + shape_str(x.value().shape()));
    const std::size_t N = x.value().dim(0), C = x.value().dim(1);
    const std::size_t hw = x.value().dim(2) * x.value().dim(3);
    Tensor<T> out({N, C});
    const T* px = x.value().data();
    for (std::size_t i = 0; i < N * C; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < hw; ++j) acc += px[i * hw + j];
        out[i] = acc / static_cast<T>(hw);
    }
    return detail::make_op<T>("mean_spatial", std::move(out), {x.node()}, [hw](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        const std::size_t nc = n.grad.numel();
        for (std::size_t i = 0; i < nc; ++i) {
            const T g = n.grad[i] / static_cast<T>(hw);
            for (std::size_t j = 0; j < hw; ++j) buf[i * hw + j] += g;
        }
    });
}

// mean over rows: [M,N] -> [N]
template <typename T>
Variable<T> mean_rows(const Variable<T>& x) {
    detail::require(x.value().rank() == 2,
                    "mean_rows: input must be 2-D, got " + shape_str(x.value().shape()));
    const std::size_t M = x.value().dim(0), N = x.value().dim(1);
    Tensor<T> out({N});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) out[j] += x.value()[i * N + j];
    for (std::size_t j = 0; j < N; ++j) out[j] /= static_cast<T>(M);
    return detail::make_op<T>("mean_rows", std::move(out), {x.node()}, [M, N](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < N; ++j) buf[i * N + j] += n.grad[j] / static_cast<T>(M);
    });
}

template <typename T>
Variable<T> reshape(const Variable<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(shape);
    return detail::make_op<T>("reshape", std::move(out), {x.node()}, [](Node<T>& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor<T>& buf = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += n.grad[i];
    });
}

// permutation of a 3-D tensor's axes: out axis k is input axis perm[k]
template <typename T>
Variable<T> permute3(const Variable<T>& x, std::array<std::size_t, 3> perm) {
    detail::require(x.value().rank() == 3,
                    "permute3: input must be 3-D, got " + shape_str(x.value().shape()));
    std::array<bool, 3> used{};
    for (std::size_t p : perm) {
        detail::require(p < 3 && !used[p], "permute3: invalid permutation");
        used[p] = true;
    }
    const Shape& in = x.value().shape();
    const Shape out_shape{in[perm[0]], in[perm[1]], in[perm[2]]};
    Tensor<T> out(out_shape);
    std::array<std::size_t, 3> in_stride{in[1] * in[2], in[2], 1};
    std::array<std::size_t, 3> stride_for_out{in_stride[perm[0]], in_stride[perm[1]],
                                              in_stride[perm[2]]};
    const T* px = x.value().data();
    T* po = out.data();
    std::size_t idx = 0;
    for (std::size_t i = 0; i < out_shape[0]; ++i)
        for (std::size_t j = 0; j < out_shape[1]; ++j)
            for (std::size_t l = 0; l < out_shape[2]; ++l)
                po[idx++] = px[i * stride_for_out[0] + j * stride_for_out[1] + l * stride_for_out[2]];
    return detail::make_op<T>(
        "permute3", std::move(out), {x.node()}, [out_shape, stride_for_out](Node<T>& n) {
            if (!n.inputs[0]->requires_grad) return;
            Tensor<T>& buf = n.inputs[0]->grad_buffer();
            const T* g = n.grad.data();
            std::size_t idx = 0;
            for (std::size_t i = 0; i < out_shape[0]; ++i)
                for (std::size_t j = 0; j < out_shape[1]; ++j)
                    for (std::size_t l = 0; l < out_shape[2]; ++l)
                        buf[i * stride_for_out[0] + j * stride_for_out[1] +
                            l * stride_for_out[2]] += g[idx++];
        });
}

// slice along the last axis of a 3-D tensor: [A,B,n] -> [A,B] at index i
template <typename T>
Variable<T> select_last(const Variable<T>& x, std::size_t index) {
    detail::require(x.value().rank() == 3,
                    "select_last: input must be 3-D, got " + shape_str(x.value().shape()));
    const std::size_t A = x.value().dim(0), B = x.value().dim(1), n_last = x.value().dim(2);
    detail::require(index < n_last, "select_last: index " + std::to_string(index) +
                                        " out of range " + std::to_string(n_last));
    Tensor<T> out({A, B});
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b) out[a * B + b] = x.value()[(a * B + b) * n_last + index];
    return detail::make_op<T>("select_last", std::move(out), {x.node()},
                              [A, B, n_last, index](Node<T>& n) {
                                  if (!n.inputs[0]->requires_grad) return;
                                  Tensor<T>& buf = n.inputs[0]->grad_buffer();
                                  for (std::size_t a = 0; a < A; ++a)
                                      for (std::size_t b = 0; b < B; ++b)
                                          buf[(a * B + b) * n_last + index] += n.grad[a * B + b];
                              });
}

// y[m,n] = x[m,n] + b[n]
template <typename T>
Variable<T> add_bias(const Variable<T>& x, const Variable<T>& b) {
    detail::require(x.value().rank() == 2 && b.value().rank() == 1 &&
                        x.value().dim(1) == b.value().dim(0),
                    "add_bias: shapes " + shape_str(x.value().shape()) + " and " +
                        shape_str(b.value().shape()) + " are incompatible");
    const std::size_t M = x.value().dim(0), N = x.value().dim(1);
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) out[i * N + j] += b.value()[j];
    return detail::make_op<T>("add_bias", std::move(out), {x.node(), b.node()},
                              [M, N](Node<T>& n) {
                                  if (n.inputs[0]->requires_grad)
                                      detail::accumulate(*n.inputs[0], n.grad);
                                  if (n.inputs[1]->requires_grad) {
                                      Tensor<T>& buf = n.inputs[1]->grad_buffer();
                                      for (std::size_t i = 0; i < M; ++i)
                                          for (std::size_t j = 0; j < N; ++j)
                                              buf[j] += n.grad[i * N + j];
                                  }
                              });
}

// CP reconstruction from three factor matrices laid out [R, D_k]:
// out[i,j,l] = scale * sum_r m1[r,i] * m2[r,j] * m3[r,l]
template <typename T>
Variable<T> cp_reconstruct(const Variable<T>& m1, const Variable<T>& m2, const Variable<T>& m3,
                           T scale_factor) {
    detail::require(m1.value().rank() == 2 && m2.value().rank() == 2 && m3.value().rank() == 2,
                    "cp_reconstruct: factor matrices must be 2-D [R,D]");
    const std::size_t R = m1.value().dim(0);
    detail::require(m2.value().dim(0) == R && m3.value().dim(0) == R,
                    "cp_reconstruct: factor ranks disagree: " + std::to_string(R) + ", " +
                        std::to_string(m2.value().dim(0)) + ", " +
                        std::to_string(m3.value().dim(0)));
    const std::size_t D1 = m1.value().dim(1), D2 = m2.value().dim(1), D3 = m3.value().dim(1);
    Tensor<T> out({D1, D2, D3});
    {
        const T* p1 = m1.value().data();
        const T* p2 = m2.value().data();
        const T* p3 = m3.value().data();
        T* po = out.data();
        for (std::size_t r = 0; r < R; ++r) {
            const T* v1 = p1 + r * D1;
            const T* v2 = p2 + r * D2;
            const T* v3 = p3 + r * D3;
            for (std::size_t i = 0; i < D1; ++i) {
                const T a = v1[i];
                if (a == T(0)) continue;
                for (std::size_t j = 0; j < D2; ++j) {
                    const T ab = a * v2[j];
                    T* row = po + (i * D2 + j) * D3;
                    for (std::size_t l = 0; l < D3; ++l) row[l] += ab * v3[l];
                }
            }
        }
        out *= scale_factor;
    }
    return detail::make_op<T>(
        "cp_reconstruct", std::move(out), {m1.node(), m2.node(), m3.node()},
        [R, D1, D2, D3, scale_factor](Node<T>& n) {
            const T* p1 = n.inputs[0]->value.data();
            const T* p2 = n.inputs[1]->value.data();
            const T* p3 = n.inputs[2]->value.data();
            const T* g = n.grad.data();
            const bool need1 = n.inputs[0]->requires_grad;
            const bool need2 = n.inputs[1]->requires_grad;
            const bool need3 = n.inputs[2]->requires_grad;
            T* d1 = need1 ? n.inputs[0]->grad_buffer().data() : nullptr;
            T* d2 = need2 ? n.inputs[1]->grad_buffer().data() : nullptr;
            T* d3 = need3 ? n.inputs[2]->grad_buffer().data() : nullptr;
            for (std::size_t r = 0; r < R; ++r) {
                const T* v1 = p1 + r * D1;
                const T* v2 = p2 + r * D2;
                const T* v3 = p3 + r * D3;
                for (std::size_t i = 0; i < D1; ++i) {
                    T acc1 = 0;
                    for (std::size_t j = 0; j < D2; ++j) {
                        const T* grow = g + (i * D2 + j) * D3;
                        T dot3 = 0;
                        for (std::size_t l = 0; l < D3; ++l) dot3 += grow[l] * v3[l];
                        acc1 += v2[j] * dot3;
                        if (need2) d2[r * D2 + j] += scale_factor * v1[i] * dot3;
                        if (need3) {
                            const T c = scale_factor * v1[i] * v2[j];
                            if (c != T(0)) {
                                T* drow = d3 + r * D3;
                                for (std::size_t l = 0; l < D3; ++l) drow[l] += c * grow[l];
                            }
                        }
                    }
                    if (need1) d1[r * D1 + i] += scale_factor * acc1;
                }
            }
        });
}

// mean softmax cross-entropy over a batch of logit rows
template <typename T>
Variable<T> softmax_cross_entropy(const Variable<T>& logits, const std::vector<int>& labels) {
    detail::require(logits.value().rank() == 2,
                    "softmax_cross_entropy: logits must be 2-D, got " +
                        shape_str(logits.value().shape()));
    const std::size_t N = logits.value().dim(0), K = logits.value().dim(1);
    detail::require(labels.size() == N, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                            " labels for " + std::to_string(N) + " rows");
    for (int y : labels)
        detail::require(y >= 0 && static_cast<std::size_t>(y) < K,
                        "softmax_cross_entropy: label " + std::to_string(y) + " out of range " +
                            std::to_string(K));
    Tensor<T> probs({N, K});
    T loss = 0;
    const T* pl = logits.value().data();
    for (std::size_t i = 0; i < N; ++i) {
        const T* row = pl + i * K;
        T mx = row[0];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        T total = 0;
        for (std::size_t k = 0; k < K; ++k) {
            const T e = std::exp(row[k] - mx);
            probs[i * K + k] = e;
            total += e;
        }
        for (std::size_t k = 0; k < K; ++k) probs[i * K + k] /= total;
        loss += std::log(total) + mx - row[labels[i]];
    }
    loss /= static_cast<T>(N);
    return detail::make_op<T>(
        "softmax_cross_entropy", Tensor<T>::scalar(loss), {logits.node()},
        [probs = std::move(probs), labels, N, K](Node<T>& n) {
            if (!n.inputs[0]->requires_grad) return;
            const T g = n.grad[0] / static_cast<T>(N);
            Tensor<T>& buf = n.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t k = 0; k < K; ++k) {
                    T p = probs[i * K + k];
                    if (k == static_cast<std::size_t>(labels[i])) p -= T(1);
                    buf[i * K + k] += g * p;
                }
            }
        });
}

}  // namespace ftn
