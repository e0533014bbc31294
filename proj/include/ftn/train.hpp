#pragma once

// Experiment harness tying the pieces together: build a backbone from a spec,
// train it on a synthetic source domain, then attach one adapter set per
// target domain while the backbone stays frozen. All state moves through the
// checkpoint container, and two guards run on every adaptation:
//
//   * the backbone digest must be identical before and after (the trainer
//     re-derives it from the live model, so an accidental update to a frozen
//     weight aborts instead of shipping), and
//   * every previously registered task must reproduce its stored probe-batch
//     logits bit-for-bit when recomputed from the new checkpoint.
//
// Parameter groups follow the optimizer split: CP factors get Adam, BN affine
// and heads get SGD with momentum, both on a cosine schedule. Everything is
// seeded, so (seed, config) fully determines the resulting checkpoint bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftn/budget.hpp"
#include "ftn/checkpoint.hpp"
#include "ftn/data.hpp"
#include "ftn/deltas.hpp"
#include "ftn/model.hpp"
#include "ftn/optim.hpp"
#include "ftn/sha256.hpp"

namespace ftn {

// Loss went non-finite or a solver failed; maps to CLI exit code 3.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A trained artifact broke a frozen-state promise; maps to CLI exit code 4.
struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double factor_lr = 0.02;
    double dense_lr = 0.05;
    double momentum = 0.9;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    bool cosine_schedule = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (factor_lr <= 0.0 || dense_lr <= 0.0) {
            throw std::invalid_argument("train config: learning rates must be positive");
        }
        if (momentum < 0.0 || momentum >= 1.0) {
            throw std::invalid_argument("train config: momentum must be in [0, 1)");
        }
        if (batch_size == 0) throw std::invalid_argument("train config: batch size must be > 0");
    }
};

inline TrainConfig parse_train_config(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.factor_lr = j.value("factor_lr", cfg.factor_lr);
    cfg.dense_lr = j.value("dense_lr", cfg.dense_lr);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.cosine_schedule = j.value("cosine_schedule", cfg.cosine_schedule);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.validate();
    return cfg;
}

inline nlohmann::json train_config_json(const TrainConfig& cfg) {
    return {{"factor_lr", cfg.factor_lr},
            {"dense_lr", cfg.dense_lr},
            {"momentum", cfg.momentum},
            {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"cosine_schedule", cfg.cosine_schedule},
            {"seed", cfg.seed}};
}

enum class AdaptMode { kFtn, kBnOnly, kFeatureExtractor };

inline const char* adapt_mode_name(AdaptMode m) {
    switch (m) {
        case AdaptMode::kFtn: return "ftn";
        case AdaptMode::kBnOnly: return "bn-only";
        case AdaptMode::kFeatureExtractor: return "feature-extractor";
    }
    return "unknown";
}

inline AdaptMode parse_adapt_mode(const std::string& name) {
    if (name == "ftn") return AdaptMode::kFtn;
    if (name == "bn-only") return AdaptMode::kBnOnly;
    if (name == "feature-extractor" || name == "fe") return AdaptMode::kFeatureExtractor;
    throw std::invalid_argument("unknown adapt mode \"" + name + "\"");
}

constexpr std::size_t kProbeCount = 8;

struct Metrics {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t samples = 0;
};

namespace detail {

constexpr std::uint64_t kSeedShuffle = 0x73687566;

inline std::string bb_weight(std::size_t l) {
    return "backbone/layer/" + std::to_string(l) + "/weight";
}
inline std::string bb_bn(std::size_t j, const char* field) {
    return "backbone/bn/" + std::to_string(j) + "/" + field;
}
inline std::string task_root(const std::string& id) { return "task/" + id + "/"; }
inline std::string task_factor(const std::string& id, std::size_t l, int mode, std::size_t r) {
    return task_root(id) + "layer/" + std::to_string(l) + "/mode" + std::to_string(mode) + "/r" +
           std::to_string(r);
}
inline std::string task_scale(const std::string& id, std::size_t l) {
    return task_root(id) + "layer/" + std::to_string(l) + "/scale";
}
inline std::string task_bn(const std::string& id, std::size_t j, const char* field) {
    return task_root(id) + "bn/" + std::to_string(j) + "/" + field;
}
inline std::string probe_name(const std::string& id) { return "probe/" + id + "/logits"; }

inline std::string config_digest(const nlohmann::json& j) {
    const std::string text = j.dump();
    return hex_digest(Sha256::of(text.data(), text.size()));
}

inline std::vector<int> int_labels(const std::vector<std::size_t>& labels,
                                   std::size_t class_count) {
    std::vector<int> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= class_count) {
            throw std::invalid_argument("dataset label " + std::to_string(labels[i]) +
                                        " out of range for " + std::to_string(class_count) +
                                        " classes");
        }
        out[i] = static_cast<int>(labels[i]);
    }
    return out;
}

// One row per factor column keeps adapter tensors independently addressable
// in the container; this is also the shape the factorization tools read.
template <typename T>
void pack_adapter(Checkpoint& c, const std::string& id, std::size_t l, const CpAdapter<T>& a) {
    for (int mode = 1; mode <= 3; ++mode) {
        const Variable<T>& f = mode == 1 ? a.mode1 : mode == 2 ? a.mode2 : a.mode3;
        const std::size_t dim = f.value().dim(1);
        for (std::size_t r = 0; r < a.rank(); ++r) {
            Tensor<T> row({dim});
            std::copy(f.value().data() + r * dim, f.value().data() + (r + 1) * dim, row.data());
            c.put(task_factor(id, l, mode, r), std::move(row));
        }
    }
    c.put(task_scale(id, l), Tensor<T>::scalar(a.scale));
}

template <typename T>
void unpack_adapter(const Checkpoint& c, const std::string& id, std::size_t l, CpAdapter<T>& a) {
    for (int mode = 1; mode <= 3; ++mode) {
        Variable<T>& f = mode == 1 ? a.mode1 : mode == 2 ? a.mode2 : a.mode3;
        Tensor<T> full = f.value();
        const std::size_t dim = full.dim(1);
        for (std::size_t r = 0; r < a.rank(); ++r) {
            const Tensor<T>& row = c.f64(task_factor(id, l, mode, r));
            if (!row.same_shape(Shape{dim})) {
                throw std::invalid_argument("checkpoint: adapter factor " +
                                            task_factor(id, l, mode, r) +
                                            " does not match the spec");
            }
            std::copy(row.data(), row.data() + dim, full.data() + r * dim);
        }
        f.assign_value(std::move(full));
    }
    a.scale = c.f64(task_scale(id, l)).data()[0];
}

template <typename T>
void pack_bn(Checkpoint& c, const std::string& prefix_id, bool backbone, std::size_t j,
             const BatchNormParams<T>& p) {
    const auto name = [&](const char* f) {
        return backbone ? bb_bn(j, f) : task_bn(prefix_id, j, f);
    };
    c.put(name("gamma"), p.gamma.value());
    c.put(name("beta"), p.beta.value());
    c.put(name("running_mean"), p.running_mean);
    c.put(name("running_var"), p.running_var);
}

template <typename T>
void unpack_bn(const Checkpoint& c, const std::string& prefix_id, bool backbone, std::size_t j,
               BatchNormParams<T>& p) {
    const auto name = [&](const char* f) {
        return backbone ? bb_bn(j, f) : task_bn(prefix_id, j, f);
    };
    const auto fetch = [&](const char* f) -> const Tensor<T>& {
        const Tensor<T>& t = c.f64(name(f));
        if (!t.same_shape(Shape{p.channels()})) {
            throw std::invalid_argument("checkpoint: " + name(f) + " does not match the spec");
        }
        return t;
    };
    p.gamma.assign_value(fetch("gamma"));
    p.beta.assign_value(fetch("beta"));
    p.running_mean = fetch("running_mean");
    p.running_var = fetch("running_var");
}

template <typename T>
Tensor<T> fetch_shaped(const Checkpoint& c, const std::string& name, const Shape& shape) {
    const Tensor<T>& t = c.f64(name);
    if (!t.same_shape(shape)) {
        throw std::invalid_argument("checkpoint: " + name + " does not match the spec");
    }
    return t;
}

}  // namespace detail

inline void pack_backbone(Checkpoint& c, const Backbone<double>& b) {
    for (std::size_t l = 0; l < b.conv_weights.size(); ++l) {
        c.put(detail::bb_weight(l), b.conv_weights[l].value());
    }
    for (std::size_t j = 0; j < b.bn.size(); ++j) detail::pack_bn(c, "", true, j, b.bn[j]);
    c.put("backbone/head/weight", b.head_w.value());
    c.put("backbone/head/bias", b.head_b.value());
}

inline BackboneSpec checkpoint_spec(const Checkpoint& c) {
    if (!c.manifest.contains("spec")) {
        throw std::invalid_argument("checkpoint: manifest carries no backbone spec");
    }
    return parse_backbone_spec(c.manifest.at("spec").dump());
}

inline Backbone<double> unpack_backbone(const Checkpoint& c, bool trainable) {
    const BackboneSpec spec = checkpoint_spec(c);
    Backbone<double> b = make_backbone<double>(spec, 0, trainable);
    for (std::size_t l = 0; l < b.conv_weights.size(); ++l) {
        b.conv_weights[l].assign_value(detail::fetch_shaped<double>(
            c, detail::bb_weight(l), b.conv_weights[l].value().shape()));
    }
    for (std::size_t j = 0; j < b.bn.size(); ++j) detail::unpack_bn(c, "", true, j, b.bn[j]);
    b.head_w.assign_value(
        detail::fetch_shaped<double>(c, "backbone/head/weight", b.head_w.value().shape()));
    b.head_b.assign_value(
        detail::fetch_shaped<double>(c, "backbone/head/bias", b.head_b.value().shape()));
    return b;
}

inline void pack_task(Checkpoint& c, const TaskAdapterSet<double>& t) {
    for (std::size_t l = 0; l < t.adapters.size(); ++l) {
        if (t.adapters[l]) detail::pack_adapter(c, t.task_id, l, *t.adapters[l]);
    }
    for (std::size_t j = 0; j < t.bn.size(); ++j) detail::pack_bn(c, t.task_id, false, j, t.bn[j]);
    c.put(detail::task_root(t.task_id) + "head/weight", t.head_w.value());
    c.put(detail::task_root(t.task_id) + "head/bias", t.head_b.value());
}

inline nlohmann::json task_entry(const Checkpoint& c, const std::string& task_id) {
    if (!c.manifest.contains("tasks")) {
        throw std::invalid_argument("checkpoint: manifest carries no task registry");
    }
    for (const auto& entry : c.manifest.at("tasks")) {
        if (entry.at("id") == task_id) return entry;
    }
    throw std::invalid_argument("checkpoint: unknown task \"" + task_id + "\"");
}

inline TaskAdapterSet<double> unpack_task(const Checkpoint& c, const Backbone<double>& backbone,
                                          const std::string& task_id) {
    const nlohmann::json entry = task_entry(c, task_id);
    if (entry.at("mode") == "source") {
        throw std::invalid_argument("checkpoint: task \"" + task_id +
                                    "\" is the source model, not an adapter set");
    }
    TaskAdapterSet<double> t = make_task_adapter_set(
        backbone, task_id, entry.at("classes").get<std::size_t>(),
        entry.at("rank").get<std::size_t>(), entry.at("seed").get<std::uint64_t>());
    for (std::size_t l = 0; l < t.adapters.size(); ++l) {
        if (t.adapters[l]) detail::unpack_adapter(c, task_id, l, *t.adapters[l]);
    }
    for (std::size_t j = 0; j < t.bn.size(); ++j) detail::unpack_bn(c, task_id, false, j, t.bn[j]);
    t.head_w.assign_value(detail::fetch_shaped<double>(c, detail::task_root(task_id) + "head/weight",
                                                       t.head_w.value().shape()));
    t.head_b.assign_value(detail::fetch_shaped<double>(c, detail::task_root(task_id) + "head/bias",
                                                       t.head_b.value().shape()));
    return t;
}

namespace detail {

// Shared minibatch loop. `forward` maps a batch tensor to logits; parameter
// groups decide what actually moves. LR follows a half-cosine over the whole
// run when the schedule is on.
template <typename ForwardFn>
void run_training(const Dataset& train, const TrainConfig& cfg, ParameterGroups<double>& groups,
                  std::size_t class_count, ForwardFn&& forward) {
    cfg.validate();
    if (cfg.epochs == 0) return;
    const std::vector<int> labels = int_labels(train.labels, class_count);

    SgdMomentum<double> dense(groups.dense, cfg.momentum);
    std::optional<Adam<double>> factors;
    if (!groups.factors.empty()) factors.emplace(groups.factors);

    const std::size_t n = train.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t step = 0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix64(cfg.seed, kSeedShuffle, epoch));
        for (std::size_t i = n - 1; i > 0; --i) {
            std::swap(order[i], order[shuffle_rng.index(i + 1)]);
        }
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t len = std::min(cfg.batch_size, n - start);
            const std::vector<std::size_t> idx(order.begin() + start,
                                               order.begin() + start + len);
            const Dataset batch = gather(train, idx);
            std::vector<int> batch_labels(len);
            for (std::size_t i = 0; i < len; ++i) batch_labels[i] = labels[idx[i]];

            Variable<double> x(batch.images, false);
            Variable<double> loss = softmax_cross_entropy(forward(x), batch_labels);
            const double loss_val = loss.value().data()[0];
            if (!std::isfinite(loss_val)) {
                throw NumericalError("training diverged: loss " + std::to_string(loss_val) +
                                     " at step " + std::to_string(step));
            }
            for (auto* p : groups.dense) p->zero_grad();
            for (auto* p : groups.factors) p->zero_grad();
            backward(loss);

            const double frac_scale =
                cfg.cosine_schedule ? cosine_lr(1.0, step, total_steps) : 1.0;
            // keep the final step strictly positive for the optimizers
            const double s = std::max(frac_scale, 1e-12);
            dense.step(cfg.dense_lr * s);
            if (factors) factors->step(cfg.factor_lr * s);
            ++step;
        }
    }
}

inline Tensor<double> eval_logits(Backbone<double>& backbone, TaskAdapterSet<double>* task,
                                  const Dataset& ds) {
    // chunked to bound graph size; chunking cannot change eval-mode values
    const std::size_t chunk = 64;
    Tensor<double> logits({ds.size(), task ? task->classes : backbone.classes});
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, ds.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Dataset part = gather(ds, idx);
        Variable<double> x(part.images, false);
        const Variable<double> out = task ? forward_task(backbone, *task, x, BnMode::kEval)
                                          : forward_source(backbone, x, BnMode::kEval);
        std::copy(out.value().data(), out.value().data() + out.value().numel(),
                  logits.data() + start * logits.dim(1));
    }
    return logits;
}

inline Metrics metrics_from_logits(const Tensor<double>& logits,
                                   const std::vector<std::size_t>& labels) {
    Metrics m;
    m.samples = labels.size();
    const std::size_t classes = logits.dim(1);
    Variable<double> lv(logits, false);
    m.loss = softmax_cross_entropy(lv, int_labels(labels, classes)).value().data()[0];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (logits.data()[i * classes + c] > logits.data()[i * classes + best]) best = c;
        }
        if (best == labels[i]) ++hits;
    }
    m.accuracy = static_cast<double>(hits) / static_cast<double>(m.samples);
    return m;
}

inline Dataset probe_batch(const SyntheticDomainConfig& domain) {
    SyntheticDomainConfig cfg = domain;
    cfg.test_count = std::max<std::size_t>(cfg.test_count, kProbeCount);
    Dataset test = make_domain_split(cfg, Split::kTest);
    std::vector<std::size_t> idx(kProbeCount);
    std::iota(idx.begin(), idx.end(), 0);
    return gather(test, idx);
}

// Recompute one registered task's probe logits from checkpoint state alone.
inline Tensor<double> recompute_probe(const Checkpoint& c, Backbone<double>& backbone,
                                      const nlohmann::json& entry) {
    const SyntheticDomainConfig domain = parse_domain_config(entry.at("domain"));
    const Dataset probe = probe_batch(domain);
    if (entry.at("mode") == "source") {
        return eval_logits(backbone, nullptr, probe);
    }
    TaskAdapterSet<double> task = unpack_task(c, backbone, entry.at("id").get<std::string>());
    return eval_logits(backbone, &task, probe);
}

}  // namespace detail

// Trains every backbone parameter on the source domain and emits the initial
// checkpoint. Zero epochs is allowed and checkpoints the raw initialization.
inline Checkpoint train_backbone(const nlohmann::json& spec_doc,
                                 const SyntheticDomainConfig& domain, const TrainConfig& cfg,
                                 std::uint64_t init_seed = 1) {
    cfg.validate();
    domain.validate();
    const BackboneSpec spec = parse_backbone_spec(spec_doc.dump());
    if (spec.classes_default != domain.class_count) {
        throw std::invalid_argument("train: spec expects " +
                                    std::to_string(spec.classes_default) +
                                    " classes, domain provides " +
                                    std::to_string(domain.class_count));
    }

    Backbone<double> backbone = make_backbone<double>(spec, init_seed, true);
    const Dataset train = make_domain_split(domain, Split::kTrain);
    if (!train.images.same_shape(
            Shape{train.size(), spec.input[0], spec.input[1], spec.input[2]})) {
        throw std::invalid_argument("train: dataset shape does not match the spec input");
    }

    ParameterGroups<double> groups = backbone_parameter_groups(backbone);
    detail::run_training(train, cfg, groups, backbone.classes, [&](const Variable<double>& x) {
        return forward_source(backbone, x, BnMode::kTrain);
    });

    Checkpoint out;
    out.manifest["format"] = "ftn-experiment";
    out.manifest["format_version"] = 1;
    out.manifest["spec"] = spec_doc;
    out.manifest["spec_name"] = spec.name;
    out.manifest["probe_count"] = kProbeCount;
    nlohmann::json entry = {{"id", "source"},
                            {"mode", "source"},
                            {"rank", 0},
                            {"classes", backbone.classes},
                            {"seed", cfg.seed},
                            {"init_seed", init_seed},
                            {"domain", domain_config_json(domain)},
                            {"epochs", cfg.epochs},
                            {"config_digest", detail::config_digest(train_config_json(cfg))},
                            {"trainable_params", frozen_param_count(spec) +
                                                     spec.classes_default *
                                                         (spec.feature_dim() + 1)}};
    out.manifest["tasks"] = nlohmann::json::array({entry});
    pack_backbone(out, backbone);
    out.put(detail::probe_name("source"),
            detail::eval_logits(backbone, nullptr, detail::probe_batch(domain)));
    return out;
}

// Adds one task to a trained checkpoint. Only the new task's parameters move;
// the backbone digest and every earlier task's probe logits are re-derived
// from the result and must come back unchanged.
inline Checkpoint adapt_task(const Checkpoint& base, const std::string& task_id,
                             const SyntheticDomainConfig& domain, AdaptMode mode,
                             std::size_t rank, const TrainConfig& cfg) {
    cfg.validate();
    domain.validate();
    if (mode == AdaptMode::kFtn && rank == 0) {
        throw std::invalid_argument("adapt: ftn mode needs rank >= 1 (use bn-only for rank 0)");
    }
    if (mode != AdaptMode::kFtn) rank = 0;
    if (base.manifest.contains("tasks")) {
        for (const auto& entry : base.manifest.at("tasks")) {
            if (entry.at("id") == task_id) {
                throw std::invalid_argument("adapt: task \"" + task_id + "\" already registered");
            }
        }
    }

    const std::string digest_before = base.backbone_digest();
    Backbone<double> backbone = unpack_backbone(base, false);
    TaskAdapterSet<double> task =
        make_task_adapter_set(backbone, task_id, domain.class_count, rank, cfg.seed);

    ParameterGroups<double> groups;
    if (mode == AdaptMode::kFeatureExtractor) {
        groups.dense = {&task.head_w, &task.head_b};
    } else {
        groups = task_parameter_groups(task);
    }
    std::size_t trainable = 0;
    for (const auto* p : groups.factors) trainable += p->value().numel();
    for (const auto* p : groups.dense) trainable += p->value().numel();

    // Cross-check the trainer's own count against the budget module before
    // any training happens; a mismatch means the two sides disagree about
    // what "per-task parameters" means and has to surface, not be patched.
    {
        const BudgetReport rep = conv_ftn_count(backbone.spec, 1, std::max<std::size_t>(rank, 1));
        const std::size_t head = domain.class_count * (backbone.spec.feature_dim() + 1);
        std::size_t expected = head;
        if (mode != AdaptMode::kFeatureExtractor) expected += rep.per_task_bn;
        if (mode == AdaptMode::kFtn) expected += rep.per_task_adapters;
        if (expected != trainable) {
            throw ContractViolation("adapt: trainer sees " + std::to_string(trainable) +
                                    " trainable parameters, budget expects " +
                                    std::to_string(expected));
        }
    }

    const Dataset train = make_domain_split(domain, Split::kTrain);
    // Feature extraction keeps BN in eval mode so even running stats freeze.
    const BnMode bn_mode =
        mode == AdaptMode::kFeatureExtractor ? BnMode::kEval : BnMode::kTrain;
    detail::run_training(train, cfg, groups, domain.class_count, [&](const Variable<double>& x) {
        return forward_task(backbone, task, x, bn_mode);
    });

    Checkpoint out;
    out.manifest = base.manifest;
    for (const auto& [name, value] : base.tensors()) {
        std::visit([&](const auto& t) { out.put(name, t); }, value);
    }
    {
        Checkpoint repacked;
        pack_backbone(repacked, backbone);
        if (repacked.backbone_digest() != digest_before) {
            throw ContractViolation("adapt: backbone changed while training task \"" + task_id +
                                    "\"");
        }
    }

    nlohmann::json merged_cfg = train_config_json(cfg);
    merged_cfg["mode"] = adapt_mode_name(mode);
    merged_cfg["rank"] = rank;
    merged_cfg["domain"] = domain_config_json(domain);
    nlohmann::json entry = {{"id", task_id},
                            {"mode", adapt_mode_name(mode)},
                            {"rank", rank},
                            {"classes", domain.class_count},
                            {"seed", cfg.seed},
                            {"domain", domain_config_json(domain)},
                            {"epochs", cfg.epochs},
                            {"config_digest", detail::config_digest(merged_cfg)},
                            {"trainable_params", trainable}};
    out.manifest["tasks"].push_back(entry);
    pack_task(out, task);
    out.put(detail::probe_name(task_id),
            detail::eval_logits(backbone, &task, detail::probe_batch(domain)));

    if (out.backbone_digest() != digest_before) {
        throw ContractViolation("adapt: checkpoint backbone digest moved");
    }
    for (const auto& prior : base.manifest.at("tasks")) {
        const std::string prior_id = prior.at("id").get<std::string>();
        const Tensor<double> fresh = detail::recompute_probe(out, backbone, prior);
        if (!fresh.bitwise_equal(out.f64(detail::probe_name(prior_id)))) {
            throw ContractViolation("adapt: task \"" + prior_id +
                                    "\" no longer reproduces its probe logits");
        }
    }
    return out;
}

// Continues training every weight from an existing checkpoint on a new
// domain: the fine-tuning baseline. The result is an independent artifact
// whose backbone has moved, which is exactly what delta extraction consumes.
inline Checkpoint finetune_backbone(const Checkpoint& base,
                                    const SyntheticDomainConfig& domain,
                                    const TrainConfig& cfg) {
    cfg.validate();
    domain.validate();
    Backbone<double> backbone = unpack_backbone(base, true);
    if (domain.class_count != backbone.classes) {
        throw std::invalid_argument("finetune: head is sized for " +
                                    std::to_string(backbone.classes) + " classes, domain has " +
                                    std::to_string(domain.class_count));
    }
    const Dataset train = make_domain_split(domain, Split::kTrain);
    ParameterGroups<double> groups = backbone_parameter_groups(backbone);
    detail::run_training(train, cfg, groups, backbone.classes, [&](const Variable<double>& x) {
        return forward_source(backbone, x, BnMode::kTrain);
    });

    Checkpoint out;
    out.manifest = base.manifest;
    out.manifest["finetuned_from"] = base.backbone_digest();
    nlohmann::json entry = {{"id", "source"},
                            {"mode", "source"},
                            {"rank", 0},
                            {"classes", backbone.classes},
                            {"seed", cfg.seed},
                            {"domain", domain_config_json(domain)},
                            {"epochs", cfg.epochs},
                            {"config_digest", detail::config_digest(train_config_json(cfg))},
                            {"trainable_params", frozen_param_count(backbone.spec) +
                                                     backbone.classes *
                                                         (backbone.spec.feature_dim() + 1)}};
    out.manifest["tasks"] = nlohmann::json::array({entry});
    pack_backbone(out, backbone);
    out.put(detail::probe_name("source"),
            detail::eval_logits(backbone, nullptr, detail::probe_batch(domain)));
    return out;
}

inline Metrics evaluate(const Checkpoint& c, const std::string& task_id, const Dataset& ds) {
    const nlohmann::json entry = task_entry(c, task_id);
    Backbone<double> backbone = unpack_backbone(c, false);
    Tensor<double> logits;
    if (entry.at("mode") == "source") {
        logits = detail::eval_logits(backbone, nullptr, ds);
    } else {
        TaskAdapterSet<double> task = unpack_task(c, backbone, task_id);
        logits = detail::eval_logits(backbone, &task, ds);
    }
    return detail::metrics_from_logits(logits, ds.labels);
}

// Evaluates a task on the held-out split of its own registered domain.
inline Metrics evaluate_stored(const Checkpoint& c, const std::string& task_id) {
    const nlohmann::json entry = task_entry(c, task_id);
    const SyntheticDomainConfig domain = parse_domain_config(entry.at("domain"));
    return evaluate(c, task_id, make_domain_split(domain, Split::kTest));
}

struct PrunedCheckpoint {
    Checkpoint ckpt;
    std::vector<std::size_t> removed;
    std::vector<double> layer_norms;
    std::vector<std::size_t> layer_index;
};

// Zeroes every adapter of one task whose reconstructed norm falls below the
// threshold and rewrites the checkpoint to match. The stored probe logits are
// refreshed from the pruned model, so the forgetting guard keeps holding on
// later adaptations, and the registry entry records the threshold applied.
inline PrunedCheckpoint prune_task(const Checkpoint& base, const std::string& task_id,
                                   double threshold) {
    const nlohmann::json entry = task_entry(base, task_id);
    if (entry.at("mode") == "source") {
        throw std::invalid_argument("prune: task \"" + task_id + "\" carries no adapters");
    }
    Backbone<double> backbone = unpack_backbone(base, false);
    const TaskAdapterSet<double> task = unpack_task(base, backbone, task_id);
    PruneResult res = prune_by_norm(task, threshold);

    PrunedCheckpoint out;
    out.ckpt.manifest = base.manifest;
    for (const auto& [name, value] : base.tensors()) {
        std::visit([&](const auto& t) { out.ckpt.put(name, t); }, value);
    }
    pack_task(out.ckpt, res.task);
    const SyntheticDomainConfig domain = parse_domain_config(entry.at("domain"));
    out.ckpt.put(detail::probe_name(task_id),
                 detail::eval_logits(backbone, &res.task, detail::probe_batch(domain)));
    for (auto& t : out.ckpt.manifest.at("tasks")) {
        if (t.at("id") == task_id) {
            t["pruned_threshold"] = threshold;
            t["pruned_adapters"] = res.removed.size();
        }
    }
    out.removed = std::move(res.removed);
    out.layer_norms = std::move(res.layer_norms);
    out.layer_index = std::move(res.layer_index);
    return out;
}

}  // namespace ftn
