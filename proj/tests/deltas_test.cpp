#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "ftn/deltas.hpp"
#include "ftn/train.hpp"
#include "test_util.hpp"

using ftn::AdaptMode;
using ftn::Checkpoint;
using ftn::DeltaSet;
using ftn::DomainTransform;
using ftn::SyntheticDomainConfig;
using ftn::Tensor;
using ftn::TrainConfig;

namespace {

nlohmann::json toy_spec_doc() {
    std::ifstream in(std::string(FTN_SPEC_DIR) + "/toy_cnn.json");
    std::stringstream ss;
    ss << in.rdbuf();
    return nlohmann::json::parse(ss.str());
}

SyntheticDomainConfig small_domain(std::uint64_t seed = 7) {
    SyntheticDomainConfig cfg;
    cfg.class_count = 4;
    cfg.train_count = 64;
    cfg.test_count = 32;
    cfg.seed = seed;
    return cfg;
}

TrainConfig quick_config(std::uint64_t seed = 100) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.seed = seed;
    return cfg;
}

const Checkpoint& base_checkpoint() {
    static const Checkpoint base =
        ftn::train_backbone(toy_spec_doc(), small_domain(), quick_config());
    return base;
}

const Checkpoint& finetuned_checkpoint() {
    static const Checkpoint ft = [] {
        SyntheticDomainConfig rot = small_domain(21);
        rot.transform = DomainTransform::kSpatialRotation;
        rot.magnitude = 75.0;
        return ftn::finetune_backbone(base_checkpoint(), rot, quick_config(5));
    }();
    return ft;
}

// trained adapter set for the pruning tests
ftn::TaskAdapterSet<double> trained_task() {
    SyntheticDomainConfig rot = small_domain(21);
    rot.transform = DomainTransform::kSpatialRotation;
    rot.magnitude = 75.0;
    const Checkpoint adapted =
        ftn::adapt_task(base_checkpoint(), "rot", rot, AdaptMode::kFtn, 2, quick_config(3));
    static ftn::Backbone<double> backbone = ftn::unpack_backbone(adapted, false);
    return ftn::unpack_task(adapted, backbone, "rot");
}

}  // namespace

TEST(Deltas, IdenticalCheckpointsGiveZeroDeltas) {
    const DeltaSet ds = ftn::extract_deltas(base_checkpoint(), base_checkpoint());
    EXPECT_EQ(ds.size(), 4u);
    for (const auto& d : ds.deltas) {
        EXPECT_EQ(d.frobenius_norm(), 0.0);
    }
}

TEST(Deltas, ZeroBaseReturnsTheFinetunedWeights) {
    const Checkpoint& base = base_checkpoint();
    Checkpoint zeros;
    zeros.manifest = base.manifest;
    for (const auto& [name, value] : base.tensors()) {
        std::visit([&](const auto& t) {
            using TT = std::decay_t<decltype(t)>;
            zeros.put(name, TT(t.shape()));
        }, value);
    }
    const DeltaSet ds = ftn::extract_deltas(base, zeros);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_TRUE(ds.deltas[i].bitwise_equal(base.f64(ds.names[i])));
    }
}

TEST(Deltas, MatchesElementwiseLoopOracle) {
    const Checkpoint& base = base_checkpoint();
    const Checkpoint& ft = finetuned_checkpoint();
    const DeltaSet ds = ftn::extract_deltas(ft, base);
    ASSERT_EQ(ds.size(), 4u);

    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Tensor<double>& a = ft.f64(ds.names[i]);
        const Tensor<double>& b = base.f64(ds.names[i]);
        for (std::size_t e = 0; e < a.numel(); ++e) {
            EXPECT_EQ(ds.deltas[i].data()[e], a.data()[e] - b.data()[e]);
        }
        total += ds.deltas[i].frobenius_norm();
    }
    // fine-tuning actually moved the weights
    EXPECT_GT(total, 1e-3);
}

TEST(Deltas, RejectsMismatchedInputs) {
    const Checkpoint& base = base_checkpoint();

    Checkpoint other_spec;
    other_spec.manifest = base.manifest;
    other_spec.manifest["spec_name"] = "different";
    for (const auto& [name, value] : base.tensors()) {
        std::visit([&](const auto& t) { other_spec.put(name, t); }, value);
    }
    EXPECT_THROW(ftn::extract_deltas(other_spec, base), std::invalid_argument);

    Checkpoint missing;
    missing.manifest = base.manifest;
    for (const auto& [name, value] : base.tensors()) {
        if (name == "backbone/layer/2/weight") continue;
        std::visit([&](const auto& t) { missing.put(name, t); }, value);
    }
    EXPECT_THROW(ftn::extract_deltas(missing, base), std::invalid_argument);
}

TEST(Deltas, FactorizationReportAggregatesItsOwnRows) {
    const DeltaSet ds = ftn::extract_deltas(finetuned_checkpoint(), base_checkpoint());
    const ftn::FactorizationReport report = ftn::factorize_deltas(ds, "svd", 2);
    ASSERT_EQ(report.rows.size(), ds.size());

    double mean = 0.0;
    for (const auto& row : report.rows) mean += row.rel_error;
    mean /= static_cast<double>(report.rows.size());
    double var = 0.0;
    for (const auto& row : report.rows) var += (row.rel_error - mean) * (row.rel_error - mean);
    var /= static_cast<double>(report.rows.size());
    EXPECT_DOUBLE_EQ(report.aggregate.mean_rel_error, mean);
    EXPECT_DOUBLE_EQ(report.aggregate.std_rel_error, std::sqrt(var));

    for (const auto& row : report.rows) {
        EXPECT_GE(row.rel_error, 0.0);
        EXPECT_GE(row.abs_error, 0.0);
        EXPECT_GT(row.param_count, 0u);
    }
    EXPECT_THROW(ftn::factorize_deltas(ds, "svd", 0), std::invalid_argument);
    EXPECT_THROW(ftn::factorize_deltas(ds, "qr", 2), std::invalid_argument);
}

TEST(Prune, ThresholdZeroPrunesNothing) {
    const ftn::TaskAdapterSet<double> task = trained_task();
    const ftn::PruneResult res = ftn::prune_by_norm(task, 0.0);
    EXPECT_TRUE(res.removed.empty());
    ASSERT_EQ(res.layer_norms.size(), 3u);  // stem carries no adapter
    for (std::size_t i = 0; i < res.task.adapters.size(); ++i) {
        ASSERT_EQ(bool(res.task.adapters[i]), bool(task.adapters[i]));
        if (task.adapters[i]) {
            EXPECT_TRUE(res.task.adapters[i]->mode1.value().bitwise_equal(
                task.adapters[i]->mode1.value()));
        }
    }
}

TEST(Prune, HugeThresholdPrunesEverything) {
    const ftn::TaskAdapterSet<double> task = trained_task();
    const ftn::PruneResult res = ftn::prune_by_norm(task, 1e18);
    EXPECT_EQ(res.removed.size(), 3u);
    for (const auto& a : res.task.adapters) {
        if (a) {
            EXPECT_EQ(ftn::reconstruct(*a).value().frobenius_norm(), 0.0);
        }
    }
    // the original set is untouched
    for (const auto& a : task.adapters) {
        if (a) {
            EXPECT_GT(ftn::reconstruct(*a).value().frobenius_norm(), 0.0);
        }
    }
}

TEST(Prune, IdempotentAtAFixedThreshold) {
    const ftn::TaskAdapterSet<double> task = trained_task();
    const ftn::PruneResult once = ftn::prune_by_norm(task, 20.0);
    const ftn::PruneResult twice = ftn::prune_by_norm(once.task, 20.0);
    EXPECT_EQ(once.removed, twice.removed);
    for (std::size_t i = 0; i < once.task.adapters.size(); ++i) {
        if (!once.task.adapters[i]) continue;
        EXPECT_TRUE(twice.task.adapters[i]->mode1.value().bitwise_equal(
            once.task.adapters[i]->mode1.value()));
        EXPECT_TRUE(twice.task.adapters[i]->mode3.value().bitwise_equal(
            once.task.adapters[i]->mode3.value()));
    }
}

TEST(Prune, RemovedCountsAreMonotoneInThreshold) {
    const ftn::TaskAdapterSet<double> task = trained_task();
    double hi = 0.0;
    for (double n : ftn::prune_by_norm(task, 0.0).layer_norms) hi = std::max(hi, n);

    std::size_t prev = 0;
    for (int i = 0; i <= 6; ++i) {
        const double th = hi * static_cast<double>(i) / 6.0 + (i == 6 ? 1e-9 : 0.0);
        const std::size_t removed = ftn::prune_by_norm(task, th).removed.size();
        EXPECT_GE(removed, prev) << "threshold " << th;
        prev = removed;
    }
    EXPECT_EQ(prev, 3u);
    EXPECT_THROW(ftn::prune_by_norm(task, -1.0), std::invalid_argument);
}

TEST(Prune, CheckpointLevelPruneUpdatesProbeAndRegistry) {
    SyntheticDomainConfig rot = small_domain(21);
    rot.transform = DomainTransform::kSpatialRotation;
    rot.magnitude = 75.0;
    const Checkpoint adapted =
        ftn::adapt_task(base_checkpoint(), "rot", rot, AdaptMode::kFtn, 2, quick_config(3));

    const ftn::PrunedCheckpoint pruned = ftn::prune_task(adapted, "rot", 1e18);
    EXPECT_EQ(pruned.removed.size(), 3u);
    EXPECT_EQ(pruned.ckpt.backbone_digest(), adapted.backbone_digest());
    EXPECT_EQ(ftn::task_entry(pruned.ckpt, "rot").at("pruned_threshold").get<double>(), 1e18);

    // factors in the artifact are zeros now, and the probe matches the new model
    EXPECT_EQ(pruned.ckpt.f64("task/rot/layer/1/mode1/r0").frobenius_norm(), 0.0);
    ftn::Backbone<double> backbone = ftn::unpack_backbone(pruned.ckpt, false);
    ftn::TaskAdapterSet<double> task = ftn::unpack_task(pruned.ckpt, backbone, "rot");
    const auto logits =
        ftn::detail::eval_logits(backbone, &task, ftn::detail::probe_batch(rot));
    EXPECT_TRUE(logits.bitwise_equal(pruned.ckpt.f64("probe/rot/logits")));
    EXPECT_FALSE(
        pruned.ckpt.f64("probe/rot/logits").bitwise_equal(adapted.f64("probe/rot/logits")));

    EXPECT_THROW(ftn::prune_task(adapted, "source", 1.0), std::invalid_argument);
    EXPECT_THROW(ftn::prune_task(adapted, "nope", 1.0), std::invalid_argument);
}
