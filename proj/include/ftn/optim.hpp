#pragma once

// Optimizers for the two parameter groups the trainer keeps apart: CP factor
// matrices get adaptive moments, dense parameters (BN affine, heads, plain
// weights) get SGD with momentum. State is positional, aligned with the
// parameter vector handed to the constructor, so stepping is deterministic.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ftn/autograd.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

// Half-cosine decay from the base rate to zero over `total_steps`.
inline double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base;
    const double t = static_cast<double>(std::min(step, total_steps)) / total_steps;
    return base * 0.5 * (1.0 + std::cos(std::acos(-1.0) * t));
}

template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<Variable<T>*> params, double momentum = 0.9)
        : params_(std::move(params)), momentum_(momentum) {
        if (momentum_ < 0.0 || momentum_ >= 1.0) {
            throw std::invalid_argument("sgd: momentum must be in [0, 1)");
        }
        velocity_.reserve(params_.size());
        for (const auto* p : params_) velocity_.emplace_back(p->value().shape());
    }

    void step(double lr) {
        if (lr <= 0.0) throw std::invalid_argument("sgd: learning rate must be positive");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& val = params_[i]->mutable_value();
            const Tensor<T>& g = params_[i]->grad();
            Tensor<T>& v = velocity_[i];
            for (std::size_t j = 0; j < val.numel(); ++j) {
                v[j] = static_cast<T>(momentum_) * v[j] + g[j];
                val[j] -= static_cast<T>(lr) * v[j];
            }
        }
    }

private:
    std::vector<Variable<T>*> params_;
    double momentum_;
    std::vector<Tensor<T>> velocity_;
};

template <typename T>
class Adam {
public:
    explicit Adam(std::vector<Variable<T>*> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (beta1_ < 0.0 || beta1_ >= 1.0 || beta2_ < 0.0 || beta2_ >= 1.0 || eps_ <= 0.0) {
            throw std::invalid_argument("adam: bad moment decay or epsilon");
        }
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto* p : params_) {
            m_.emplace_back(p->value().shape());
            v_.emplace_back(p->value().shape());
        }
    }

    void step(double lr) {
        if (lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& val = params_[i]->mutable_value();
            const Tensor<T>& g = params_[i]->grad();
            for (std::size_t j = 0; j < val.numel(); ++j) {
                m_[i][j] = static_cast<T>(beta1_) * m_[i][j] + static_cast<T>(1.0 - beta1_) * g[j];
                v_[i][j] =
                    static_cast<T>(beta2_) * v_[i][j] + static_cast<T>(1.0 - beta2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                val[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    std::vector<Variable<T>*> params_;
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace ftn
