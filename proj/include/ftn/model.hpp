#pragma once

// Whole-model assembly over a sequential conv spec: one frozen backbone
// holding the shared conv weights plus its own (source-domain) batch norm
// and head, and any number of task adapter sets, each owning CP adapters
// for the adaptable convs, task batch norm, and a task head. Parameters of
// different tasks are disjoint by construction, which is what makes the
// no-interference guarantees testable as bit equality.
//
// The forward pass runs conv -> bn -> relu per block, global average
// pooling after the last block, then the linear head.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftn/adapters.hpp"
#include "ftn/backbone_spec.hpp"
#include "ftn/layers.hpp"
#include "ftn/ops.hpp"
#include "ftn/rng.hpp"

namespace ftn {

namespace detail {

// seed-domain separators so backbone, adapter, and head draws never alias
inline constexpr std::uint64_t kSeedConv = 0x636f6e76;
inline constexpr std::uint64_t kSeedHead = 0x68656164;
inline constexpr std::uint64_t kSeedAdapter = 0x61646170;

template <typename T>
Variable<T> xavier_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng, bool trainable) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor<T> w({fan_in, fan_out});
    for (std::size_t i = 0; i < w.numel(); ++i)
        w[i] = static_cast<T>(rng.uniform(-bound, bound));
    return Variable<T>(std::move(w), trainable);
}

}  // namespace detail

template <typename T>
struct Backbone {
    BackboneSpec spec;
    std::vector<Variable<T>> conv_weights;     // one per conv record
    std::vector<BatchNormParams<T>> bn;        // source-domain bn, one per bn record
    Variable<T> head_w;                        // [features, classes]
    Variable<T> head_b;                        // [classes]
    std::size_t classes = 0;
};

template <typename T>
Backbone<T> make_backbone(const BackboneSpec& spec, std::uint64_t seed, bool trainable = true) {
    spec.validate();
    detail::spec_require(spec.sequential, "model: backbone requires a sequential spec");

    Backbone<T> b;
    b.spec = spec;
    b.classes = spec.classes_default;
    std::size_t ordinal = 0;
    for (const auto& l : spec.layers) {
        if (l.kind == LayerKind::kConv) {
            // He-normal fan-in init, the usual choice ahead of relu
            Rng rng(mix64(seed, detail::kSeedConv, ordinal));
            const double stddev = std::sqrt(2.0 / static_cast<double>(l.k * l.k * l.c_in));
            Tensor<T> w({l.c_out, l.c_in, l.k, l.k});
            for (std::size_t i = 0; i < w.numel(); ++i)
                w[i] = static_cast<T>(rng.normal(0.0, stddev));
            b.conv_weights.emplace_back(std::move(w), trainable);
            ++ordinal;
        } else if (l.kind == LayerKind::kBn) {
            b.bn.push_back(make_batchnorm_params<T>(l.channels, trainable));
        }
    }
    Rng rng(mix64(seed, detail::kSeedHead));
    b.head_w = detail::xavier_linear<T>(spec.feature_dim(), b.classes, rng, trainable);
    b.head_b = Variable<T>(Tensor<T>({b.classes}), trainable);
    return b;
}

template <typename T>
struct TaskAdapterSet {
    std::string task_id;
    std::size_t rank = 0;     // 0 means bn+head only
    std::size_t classes = 0;
    // aligned with the spec's conv records; disengaged where not adapted
    std::vector<std::optional<CpAdapter<T>>> adapters;
    // aligned with the spec's bn records
    std::vector<BatchNormParams<T>> bn;
    Variable<T> head_w;
    Variable<T> head_b;

    std::size_t adapter_scalar_count() const {
        std::size_t total = 0;
        for (const auto& a : adapters)
            if (a) total += a->param_count();
        return total;
    }
};

// Fresh task state on top of a backbone: adapters initialized per layer
// (rank 0 skips them entirely), bn cloned from the backbone's current
// statistics, head drawn anew.
template <typename T>
TaskAdapterSet<T> make_task_adapter_set(const Backbone<T>& backbone, const std::string& task_id,
                                        std::size_t classes, std::size_t rank,
                                        std::uint64_t seed) {
    detail::spec_require(!task_id.empty(), "model: task id must be nonempty");
    detail::spec_require(classes >= 2, "model: task needs at least 2 classes");

    TaskAdapterSet<T> t;
    t.task_id = task_id;
    t.rank = rank;
    t.classes = classes;
    std::size_t ordinal = 0;
    for (const auto& l : backbone.spec.layers) {
        if (l.kind == LayerKind::kConv) {
            if (l.adaptable && rank >= 1) {
                t.adapters.push_back(init_conv_adapter<T>(
                    l.k * l.k, l.c_in, l.c_out, rank,
                    mix64(seed, detail::kSeedAdapter, ordinal)));
            } else {
                t.adapters.push_back(std::nullopt);
            }
            ++ordinal;
        } else if (l.kind == LayerKind::kBn) {
            t.bn.push_back(clone_batchnorm_params(backbone.bn[t.bn.size()]));
        }
    }
    Rng rng(mix64(seed, detail::kSeedHead));
    t.head_w = detail::xavier_linear<T>(backbone.spec.feature_dim(), classes, rng, true);
    t.head_b = Variable<T>(Tensor<T>({classes}), true);
    return t;
}

// deep copy: every leaf is rebuilt, so the clone and the source never alias
template <typename T>
TaskAdapterSet<T> clone_task_adapter_set(const TaskAdapterSet<T>& src, bool trainable = true) {
    TaskAdapterSet<T> t;
    t.task_id = src.task_id;
    t.rank = src.rank;
    t.classes = src.classes;
    for (const auto& a : src.adapters) {
        if (a) {
            t.adapters.push_back(clone_adapter(*a, trainable));
        } else {
            t.adapters.push_back(std::nullopt);
        }
    }
    for (const auto& p : src.bn) t.bn.push_back(clone_batchnorm_params(p, trainable));
    t.head_w = Variable<T>(src.head_w.value(), trainable);
    t.head_b = Variable<T>(src.head_b.value(), trainable);
    return t;
}

namespace detail {

template <typename T>
Variable<T> run_blocks(const Backbone<T>& backbone,
                       const std::vector<std::optional<CpAdapter<T>>>* adapters,
                       std::vector<BatchNormParams<T>>& bn, const Variable<T>& x, BnMode mode) {
    const BackboneSpec& spec = backbone.spec;
    require(x.value().rank() == 4, "model: input must be 4-D [N,C,H,W], got " +
                                       shape_str(x.value().shape()));
    require(x.value().dim(1) == spec.input[0] && x.value().dim(2) == spec.input[1] &&
                x.value().dim(3) == spec.input[2],
            "model: input shape " + shape_str(x.value().shape()) + " does not match spec " +
                spec.name);
    require(bn.size() == backbone.bn.size(), "model: bn list does not cover the spec");
    require(!adapters || adapters->size() == backbone.conv_weights.size(),
            "model: adapter list does not cover the spec");

    Variable<T> h = x;
    std::size_t conv_idx = 0, bn_idx = 0;
    for (const auto& l : spec.layers) {
        if (l.kind == LayerKind::kConv) {
            const Variable<T>& w = backbone.conv_weights[conv_idx];
            const bool adapt = adapters && (*adapters)[conv_idx].has_value();
            const Variable<T> w_eff = adapt ? apply_conv(w, *(*adapters)[conv_idx]) : w;
            h = conv2d(h, w_eff, l.stride, l.padding);
            ++conv_idx;
        } else {
            h = relu(batchnorm_forward(h, bn[bn_idx], mode));
            ++bn_idx;
        }
    }
    return mean_spatial(h);
}

}  // namespace detail

template <typename T>
Variable<T> forward_task(const Backbone<T>& backbone, TaskAdapterSet<T>& task,
                         const Variable<T>& x, BnMode mode) {
    const Variable<T> feat = detail::run_blocks(backbone, &task.adapters, task.bn, x, mode);
    return add_bias(matmul(feat, task.head_w), task.head_b);
}

// the backbone run as its own source-domain network (no adapters)
template <typename T>
Variable<T> forward_source(Backbone<T>& backbone, const Variable<T>& x, BnMode mode) {
    const Variable<T> feat = detail::run_blocks(
        backbone, static_cast<const std::vector<std::optional<CpAdapter<T>>>*>(nullptr),
        backbone.bn, x, mode);
    return add_bias(matmul(feat, backbone.head_w), backbone.head_b);
}

// ---- parameter enumeration for optimizers and budget cross-checks ----

template <typename T>
struct ParameterGroups {
    std::vector<Variable<T>*> factors;  // CP factor matrices
    std::vector<Variable<T>*> dense;  // everything stepped by plain SGD: bn affine, heads, dense weights
};

template <typename T>
ParameterGroups<T> task_parameter_groups(TaskAdapterSet<T>& t) {
    ParameterGroups<T> g;
    for (auto& a : t.adapters) {
        if (!a) continue;
        g.factors.push_back(&a->mode1);
        g.factors.push_back(&a->mode2);
        g.factors.push_back(&a->mode3);
    }
    for (auto& p : t.bn) {
        g.dense.push_back(&p.gamma);
        g.dense.push_back(&p.beta);
    }
    g.dense.push_back(&t.head_w);
    g.dense.push_back(&t.head_b);
    return g;
}

template <typename T>
ParameterGroups<T> backbone_parameter_groups(Backbone<T>& b) {
    ParameterGroups<T> g;
    for (auto& w : b.conv_weights) g.dense.push_back(&w);
    for (auto& p : b.bn) {
        g.dense.push_back(&p.gamma);
        g.dense.push_back(&p.beta);
    }
    g.dense.push_back(&b.head_w);
    g.dense.push_back(&b.head_b);
    return g;
}

}  // namespace ftn
