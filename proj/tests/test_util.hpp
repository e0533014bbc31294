#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ftn/autograd.hpp"
#include "ftn/rng.hpp"
#include "ftn/tensor.hpp"

namespace testutil {

template <typename T>
void fill_uniform(ftn::Tensor<T>& t, ftn::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
ftn::Tensor<T> random_tensor(const ftn::Shape& shape, ftn::Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
    ftn::Tensor<T> t(shape);
    fill_uniform(t, rng, lo, hi);
    return t;
}

inline double max_abs_diff(const ftn::Tensor<double>& a, const ftn::Tensor<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

struct GradCheckReport {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst_rel = 0.0;
};

// Central-difference check of every listed leaf against reverse-mode
// gradients. make_loss rebuilds the graph from the leaves' current values
// and returns the scalar loss variable. A coordinate passes when
// |analytic - numeric| <= atol or <= rtol * max(|analytic|, |numeric|).
template <typename F>
GradCheckReport check_gradients(const std::vector<ftn::Variable<double>*>& leaves, F&& make_loss,
                                double eps = 1e-5, double rtol = 1e-4, double atol = 1e-8) {
    GradCheckReport report;
    {
        ftn::Variable<double> loss = make_loss();
        ftn::backward(loss);
    }
    std::vector<ftn::Tensor<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto* leaf : leaves) analytic.push_back(leaf->grad());

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        ftn::Tensor<double>& value = leaves[li]->mutable_value();
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double saved = value[i];
            value[i] = saved + eps;
            const double f_plus = make_loss().value()[0];
            value[i] = saved - eps;
            const double f_minus = make_loss().value()[0];
            value[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic[li][i];
            const double diff = std::abs(a - numeric);
            const double denom = std::max(std::abs(a), std::abs(numeric));
            ++report.checked;
            if (diff > atol && diff > rtol * denom) {
                ++report.failed;
            }
            if (diff > atol && denom > 0.0)
                report.worst_rel = std::max(report.worst_rel, diff / denom);
        }
    }
    return report;
}

}  // namespace testutil
