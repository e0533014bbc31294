#pragma once

// CP-format weight deltas. A CpAdapter stores three factor matrices
// [R, D1], [R, D2], [R, D3] plus a scalar multiplier; the reconstructed
// delta is scale * sum_r outer(mode1[r], mode2[r], mode3[r]). Convolution
// weights [C_out, C_in, k, k] correspond to the 3-way layout
// [k*k, C_in, C_out] by flattening the spatial dims row-major
// (q = kh*k + kw) and reversing the axis order; attention projections use
// their native [d_model, d_head, n_heads] layout. Both "apply" helpers add
// the delta to a frozen base weight without touching it.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "ftn/autograd.hpp"
#include "ftn/ops.hpp"
#include "ftn/rng.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

enum class AdapterKind { ConvWeight, AttnQuery, AttnValue, AttnOutput };

// default reconstruction gains for the two attention placements
inline constexpr double kAlphaQv = 10.0;
inline constexpr double kAlphaOutput = 100.0;

inline const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::ConvWeight: return "conv-weight";
        case AdapterKind::AttnQuery: return "attn-query";
        case AdapterKind::AttnValue: return "attn-value";
        case AdapterKind::AttnOutput: return "attn-output";
    }
    return "?";
}

template <typename T>
struct CpAdapter {
    Variable<T> mode1;  // [R, D1]
    Variable<T> mode2;  // [R, D2]
    Variable<T> mode3;  // [R, D3]
    T scale{1};

    CpAdapter() = default;
    CpAdapter(Variable<T> m1, Variable<T> m2, Variable<T> m3, T s)
        : mode1(std::move(m1)), mode2(std::move(m2)), mode3(std::move(m3)), scale(s) {
        validate();
    }

    std::size_t rank() const { return mode1.value().dim(0); }
    std::size_t d1() const { return mode1.value().dim(1); }
    std::size_t d2() const { return mode2.value().dim(1); }
    std::size_t d3() const { return mode3.value().dim(1); }
    std::size_t param_count() const { return rank() * (d1() + d2() + d3()); }

    void validate() const {
        if (!mode1.defined() || !mode2.defined() || !mode3.defined())
            throw std::invalid_argument("CpAdapter: undefined factor matrix");
        if (mode1.value().rank() != 2 || mode2.value().rank() != 2 || mode3.value().rank() != 2)
            throw std::invalid_argument("CpAdapter: factor matrices must be 2-D [R,D]");
        const std::size_t r = mode1.value().dim(0);
        if (mode2.value().dim(0) != r || mode3.value().dim(0) != r)
            throw std::invalid_argument(
                "CpAdapter: factor ranks disagree: " + std::to_string(r) + ", " +
                std::to_string(mode2.value().dim(0)) + ", " +
                std::to_string(mode3.value().dim(0)));
    }

    // fresh leaves with copied values; used where the original must stay intact
    CpAdapter clone() const {
        return CpAdapter(Variable<T>(mode1.value(), mode1.requires_grad()),
                         Variable<T>(mode2.value(), mode2.requires_grad()),
                         Variable<T>(mode3.value(), mode3.requires_grad()), scale);
    }
};

template <typename T>
CpAdapter<T> zero_adapter(std::size_t d1, std::size_t d2, std::size_t d3, std::size_t rank,
                          T scale = T(1)) {
    if (rank == 0) throw std::invalid_argument("zero_adapter: rank must be positive");
    return CpAdapter<T>(Variable<T>(Tensor<T>({rank, d1}), true),
                        Variable<T>(Tensor<T>({rank, d2}), true),
                        Variable<T>(Tensor<T>({rank, d3}), true), scale);
}

// overwrite all three factor matrices with zeros in place, keeping the leaves
template <typename T>
void zero_factors(CpAdapter<T>& a) {
    a.mode1.assign_value(Tensor<T>(a.mode1.value().shape()));
    a.mode2.assign_value(Tensor<T>(a.mode2.value().shape()));
    a.mode3.assign_value(Tensor<T>(a.mode3.value().shape()));
}

// deep copy with fresh leaves; edits to the clone never reach the original
template <typename T>
CpAdapter<T> clone_adapter(const CpAdapter<T>& a, bool trainable = true) {
    return CpAdapter<T>(Variable<T>(a.mode1.value(), trainable),
                        Variable<T>(a.mode2.value(), trainable),
                        Variable<T>(a.mode3.value(), trainable), a.scale);
}

// Factor vectors are Xavier-uniform with the fan set to the vector's own
// length: entries of a length-n vector are drawn from U(-sqrt(6/n), sqrt(6/n)).
// Draw order is mode1 row by row, then mode2, then mode3, so a seed pins the
// adapter bit for bit.
template <typename T>
CpAdapter<T> init_conv_adapter(std::size_t k2, std::size_t c_in, std::size_t c_out,
                               std::size_t rank, std::uint64_t seed) {
    if (rank == 0) throw std::invalid_argument("init_conv_adapter: rank must be positive");
    Rng rng(seed);
    const auto draw = [&rng](std::size_t r, std::size_t n) {
        const double a = std::sqrt(6.0 / static_cast<double>(n));
        Tensor<T> m({r, n});
        for (std::size_t i = 0; i < m.numel(); ++i) m[i] = static_cast<T>(rng.uniform(-a, a));
        return m;
    };
    Tensor<T> m1 = draw(rank, k2);
    Tensor<T> m2 = draw(rank, c_in);
    Tensor<T> m3 = draw(rank, c_out);
    return CpAdapter<T>(Variable<T>(std::move(m1), true), Variable<T>(std::move(m2), true),
                        Variable<T>(std::move(m3), true), T(1));
}

// Attention factors are Gaussian(0, 0.05^2) and the reconstruction is scaled
// by alpha / R.
template <typename T>
CpAdapter<T> init_attn_adapter(std::size_t d_model, std::size_t d_head, std::size_t n_heads,
                               std::size_t rank, double alpha, std::uint64_t seed) {
    if (rank == 0) throw std::invalid_argument("init_attn_adapter: rank must be positive");
    if (alpha <= 0.0) throw std::invalid_argument("init_attn_adapter: alpha must be positive");
    Rng rng(seed);
    const auto draw = [&rng](std::size_t r, std::size_t n) {
        Tensor<T> m({r, n});
        for (std::size_t i = 0; i < m.numel(); ++i) m[i] = static_cast<T>(rng.normal(0.0, 0.05));
        return m;
    };
    Tensor<T> m1 = draw(rank, d_model);
    Tensor<T> m2 = draw(rank, d_head);
    Tensor<T> m3 = draw(rank, n_heads);
    const T scale = static_cast<T>(alpha / static_cast<double>(rank));
    return CpAdapter<T>(Variable<T>(std::move(m1), true), Variable<T>(std::move(m2), true),
                        Variable<T>(std::move(m3), true), scale);
}

template <typename T>
Variable<T> reconstruct(const CpAdapter<T>& a) {
    a.validate();
    return cp_reconstruct(a.mode1, a.mode2, a.mode3, a.scale);
}

// plain-tensor layout maps between conv weights and their 3-way view

template <typename T>
Tensor<T> conv_weight_to_3way(const Tensor<T>& w4) {
    if (w4.rank() != 4 || w4.dim(2) != w4.dim(3))
        throw std::invalid_argument("conv_weight_to_3way: expected [C_out,C_in,k,k], got " +
                                    shape_str(w4.shape()));
    const std::size_t co = w4.dim(0), ci = w4.dim(1), k = w4.dim(2);
    Tensor<T> w3({k * k, ci, co});
    for (std::size_t a = 0; a < co; ++a)
        for (std::size_t b = 0; b < ci; ++b)
            for (std::size_t q = 0; q < k * k; ++q)
                w3[(q * ci + b) * co + a] = w4[(a * ci + b) * k * k + q];
    return w3;
}

template <typename T>
Tensor<T> conv_3way_to_weight(const Tensor<T>& w3, std::size_t k) {
    if (w3.rank() != 3 || w3.dim(0) != k * k)
        throw std::invalid_argument("conv_3way_to_weight: expected [k*k,C_in,C_out], got " +
                                    shape_str(w3.shape()));
    const std::size_t ci = w3.dim(1), co = w3.dim(2);
    Tensor<T> w4({co, ci, k, k});
    for (std::size_t a = 0; a < co; ++a)
        for (std::size_t b = 0; b < ci; ++b)
            for (std::size_t q = 0; q < k * k; ++q)
                w4[(a * ci + b) * k * k + q] = w3[(q * ci + b) * co + a];
    return w4;
}

// Adds the adapter's delta to a conv weight [C_out,C_in,k,k]. The delta is
// reconstructed in the 3-way layout and re-ordered differentiably, so
// gradients reach the factors while the base stays frozen.
template <typename T>
Variable<T> apply_conv(const Variable<T>& base_w4, const CpAdapter<T>& a) {
    const Tensor<T>& w = base_w4.value();
    if (w.rank() != 4 || w.dim(2) != w.dim(3))
        throw std::invalid_argument("apply_conv: base must be [C_out,C_in,k,k], got " +
                                    shape_str(w.shape()));
    const std::size_t co = w.dim(0), ci = w.dim(1), k = w.dim(2);
    if (a.d1() != k * k || a.d2() != ci || a.d3() != co)
        throw std::invalid_argument("apply_conv: adapter dims [" + std::to_string(a.d1()) + "," +
                                    std::to_string(a.d2()) + "," + std::to_string(a.d3()) +
                                    "] do not match weight " + shape_str(w.shape()));
    Variable<T> delta3 = reconstruct(a);                       // [k*k, C_in, C_out]
    Variable<T> delta_t = permute3(delta3, {2, 1, 0});         // [C_out, C_in, k*k]
    Variable<T> delta4 = reshape(delta_t, {co, ci, k, k});
    return add(base_w4, delta4);
}

// Adds the adapter's delta to an attention projection [d_model, d_head, n_heads].
template <typename T>
Variable<T> apply_attn(const Variable<T>& base_w3, const CpAdapter<T>& a) {
    const Tensor<T>& w = base_w3.value();
    if (w.rank() != 3)
        throw std::invalid_argument("apply_attn: base must be [d_model,d,n], got " +
                                    shape_str(w.shape()));
    if (a.d1() != w.dim(0) || a.d2() != w.dim(1) || a.d3() != w.dim(2))
        throw std::invalid_argument("apply_attn: adapter dims [" + std::to_string(a.d1()) + "," +
                                    std::to_string(a.d2()) + "," + std::to_string(a.d3()) +
                                    "] do not match weight " + shape_str(w.shape()));
    return add(base_w3, reconstruct(a));
}

}  // namespace ftn
