#pragma once

// Parameter accounting over backbone specs.
//
// Counting conventions, fixed here and relied on by the tests:
//   - conv kernels are bias-free: k^2 * c_in * c_out,
//   - a batch norm contributes its trainable affine pair, 2 * channels
//     (running buffers are state, not parameters),
//   - an attention block contributes its four projections, 4 * d_model^2,
//   - the task head is a linear map with bias: classes * (features + 1),
//   - a conv adapter of rank R holds R * (k^2 + c_in + c_out) scalars plus
//     nothing else (the scale is a fixed constant, not trained),
//   - attention adapters: R * (d_model + d + n) per adapted projection, so
//     2LR(d_model+d+n) for the query+value variant and LR(d_model+d+n) for
//     the output-projection variant.

#include <cstddef>
#include <optional>
#include <string>

#include "ftn/backbone_spec.hpp"

namespace ftn {

struct BudgetReport {
    std::size_t frozen_backbone = 0;
    std::size_t per_task_adapters = 0;
    std::size_t per_task_bn = 0;
    std::size_t per_task_head = 0;
    std::size_t tasks = 0;

    std::size_t per_task_total() const {
        return per_task_adapters + per_task_bn + per_task_head;
    }
    std::size_t total() const { return frozen_backbone + tasks * per_task_total(); }
    // what a fully shared feature extractor with per-task heads would cost
    std::size_t feature_extractor_total() const {
        return frozen_backbone + tasks * per_task_head;
    }
    double multiplier() const {
        return static_cast<double>(total()) / static_cast<double>(feature_extractor_total());
    }
};

inline std::size_t frozen_param_count(const BackboneSpec& spec) {
    std::size_t total = 0;
    for (const auto& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::kConv: total += l.k * l.k * l.c_in * l.c_out; break;
            case LayerKind::kBn: total += 2 * l.channels; break;
            case LayerKind::kLinear: total += l.c_in * l.c_out + (l.bias ? l.c_out : 0); break;
            case LayerKind::kAttention: total += 4 * l.d_model * l.d_model; break;
        }
    }
    return total;
}

inline BudgetReport conv_ftn_count(const BackboneSpec& spec, std::size_t tasks,
                                   std::size_t rank) {
    detail::spec_require(tasks >= 1, "budget: task count must be positive");
    detail::spec_require(rank >= 1, "budget: rank must be positive");
    detail::spec_require(spec.conv_count() >= 1, "budget: spec has no conv layers");

    BudgetReport r;
    r.tasks = tasks;
    r.frozen_backbone = frozen_param_count(spec);
    for (const auto& l : spec.layers) {
        if (l.kind == LayerKind::kConv && l.adaptable)
            r.per_task_adapters += rank * (l.k * l.k + l.c_in + l.c_out);
        if (l.kind == LayerKind::kBn) r.per_task_bn += 2 * l.channels;
    }
    r.per_task_head = spec.classes_default * (spec.feature_dim() + 1);
    return r;
}

enum class AttnVariant { kQv, kOutput };

inline std::size_t attn_ftn_count(AttnVariant variant, std::size_t layers, std::size_t rank,
                                  std::size_t d_model, std::size_t n_heads) {
    detail::spec_require(layers >= 1 && rank >= 1, "budget: layers and rank must be positive");
    detail::spec_require(n_heads >= 1 && d_model % n_heads == 0,
                         "budget: d_model must be divisible by n_heads");
    const std::size_t d = d_model / n_heads;
    const std::size_t per_projection = layers * rank * (d_model + d + n_heads);
    return variant == AttnVariant::kQv ? 2 * per_projection : per_projection;
}

enum class BaselineMethod { kFinetune, kLora, kKAdaptation, kSsf };

// comparison methods are counted, not implemented; `extra` carries the
// method-specific free parameter (K for the Kronecker method, m for SSF)
inline std::size_t baseline_count(BaselineMethod method, std::size_t layers, std::size_t rank,
                                  std::size_t d_model,
                                  std::optional<std::size_t> extra = std::nullopt) {
    detail::spec_require(layers >= 1 && d_model >= 1,
                         "budget: layers and d_model must be positive");
    switch (method) {
        case BaselineMethod::kFinetune:
            return 4 * layers * d_model * d_model;
        case BaselineMethod::kLora:
            detail::spec_require(rank >= 1, "budget: LoRA needs a positive rank");
            return 4 * layers * rank * d_model;
        case BaselineMethod::kKAdaptation: {
            detail::spec_require(rank >= 1, "budget: KAdaptation needs a positive rank");
            detail::spec_require(extra.has_value(), "budget: KAdaptation needs its K parameter");
            const std::size_t k = *extra;
            return 2 * layers * rank * d_model + k * k * k;
        }
        case BaselineMethod::kSsf:
            detail::spec_require(extra.has_value(),
                                 "budget: SSF needs its per-block vector count m");
            return *extra * layers * d_model;
    }
    throw std::invalid_argument("budget: unknown baseline method");
}

}  // namespace ftn
