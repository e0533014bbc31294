// End-to-end acceptance checks. Each test prints one PASS/FAIL line so a
// glance at the log shows which guarantees hold. Tolerances are pinned here
// and nowhere else; the library headers never read them.

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "ftn/budget.hpp"
#include "ftn/deltas.hpp"
#include "ftn/factorize.hpp"
#include "ftn/layers.hpp"
#include "ftn/train.hpp"
#include "test_util.hpp"

using ftn::AdaptMode;
using ftn::Checkpoint;
using ftn::CheckpointError;
using ftn::DomainTransform;
using ftn::Rng;
using ftn::SyntheticDomainConfig;
using ftn::Tensor;
using ftn::TrainConfig;
using ftn::Variable;

namespace {

bool report(int n, const char* label, bool ok) {
    std::printf("ACCEPTANCE %2d/11 %-56s %s\n", n, label, ok ? "PASS" : "FAIL");
    std::fflush(stdout);
    return ok;
}

// ---- pinned experiment recipe (matches configs/) ----

nlohmann::json toy_spec_doc() {
    std::ifstream in(std::string(FTN_SPEC_DIR) + "/toy_cnn.json");
    std::stringstream ss;
    ss << in.rdbuf();
    return nlohmann::json::parse(ss.str());
}

SyntheticDomainConfig domain_of(DomainTransform t, double magnitude, std::uint64_t seed) {
    SyntheticDomainConfig cfg;
    cfg.transform = t;
    cfg.magnitude = magnitude;
    cfg.class_count = 4;
    cfg.train_count = 256;
    cfg.test_count = 128;
    cfg.seed = seed;
    return cfg;
}

SyntheticDomainConfig source_domain() { return domain_of(DomainTransform::kIdentity, 0.0, 7); }
SyntheticDomainConfig rotation_domain() {
    return domain_of(DomainTransform::kSpatialRotation, 75.0, 21);
}
SyntheticDomainConfig hue_domain() { return domain_of(DomainTransform::kHueRotation, 120.0, 22); }
SyntheticDomainConfig noise_domain() {
    return domain_of(DomainTransform::kAdditiveNoise, 0.12, 23);
}

TrainConfig backbone_config() {
    TrainConfig cfg;
    cfg.dense_lr = 0.05;
    cfg.factor_lr = 0.05;
    cfg.epochs = 15;
    cfg.batch_size = 32;
    cfg.cosine_schedule = true;
    cfg.seed = 1;
    return cfg;
}

TrainConfig adapt_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.factor_lr = 0.05;
    cfg.dense_lr = 0.05;
    cfg.epochs = 20;
    cfg.batch_size = 32;
    cfg.cosine_schedule = true;
    cfg.seed = seed;
    return cfg;
}

const Checkpoint& trained_base() {
    static const Checkpoint base =
        ftn::train_backbone(toy_spec_doc(), source_domain(), backbone_config());
    return base;
}

// three seeds of one (mode, rank) cell on the rotation domain, cached because
// several criteria drill into the same artifacts
const std::vector<Checkpoint>& rotation_runs(AdaptMode mode, std::size_t rank) {
    static std::map<std::pair<int, std::size_t>, std::vector<Checkpoint>> cache;
    auto& slot = cache[{static_cast<int>(mode), rank}];
    if (slot.empty()) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            slot.push_back(ftn::adapt_task(trained_base(), "target", rotation_domain(), mode,
                                           rank, adapt_config(s)));
        }
    }
    return slot;
}

const std::vector<Checkpoint>& rotation_finetunes() {
    static const std::vector<Checkpoint> runs = [] {
        std::vector<Checkpoint> out;
        for (std::uint64_t s = 0; s < 3; ++s) {
            out.push_back(ftn::finetune_backbone(trained_base(), rotation_domain(),
                                                 adapt_config(s)));
        }
        return out;
    }();
    return runs;
}

double mean_stored_accuracy(const std::vector<Checkpoint>& runs, const std::string& task) {
    double sum = 0.0;
    for (const auto& c : runs) sum += ftn::evaluate_stored(c, task).accuracy;
    return sum / static_cast<double>(runs.size());
}

}  // namespace

TEST(Acceptance, TransformerBudgetCounts) {
    const bool out = ftn::attn_ftn_count(ftn::AttnVariant::kOutput, 12, 4, 768, 12) == 40512u;
    const bool qv = ftn::attn_ftn_count(ftn::AttnVariant::kQv, 12, 4, 768, 12) == 81024u;
    const bool lora = ftn::baseline_count(ftn::BaselineMethod::kLora, 12, 4, 768) == 147456u;
    EXPECT_TRUE(report(1, "transformer per-task budget counts are exact", out && qv && lora));
    EXPECT_EQ(ftn::attn_ftn_count(ftn::AttnVariant::kOutput, 12, 4, 768, 12), 40512u);
    EXPECT_EQ(ftn::attn_ftn_count(ftn::AttnVariant::kQv, 12, 4, 768, 12), 81024u);
    EXPECT_EQ(ftn::baseline_count(ftn::BaselineMethod::kLora, 12, 4, 768), 147456u);
}

TEST(Acceptance, ConvBudgetCounts) {
    const auto r34 = ftn::load_backbone_spec(std::string(FTN_SPEC_DIR) + "/resnet34.json");
    const auto r50 = ftn::load_backbone_spec(std::string(FTN_SPEC_DIR) + "/resnet50.json");
    const std::size_t a34 = ftn::conv_ftn_count(r34, 1, 1).per_task_adapters;
    const std::size_t a50 = ftn::conv_ftn_count(r50, 1, 1).per_task_adapters;
    EXPECT_TRUE(report(2, "conv per-task budget counts are exact",
                       a34 == 16291u && a50 == 49204u));
    EXPECT_EQ(a34, 16291u);
    EXPECT_EQ(a50, 49204u);
}

TEST(Acceptance, ZeroAdapterEquivalence) {
    const auto spec = ftn::parse_backbone_spec(toy_spec_doc().dump());
    ftn::Backbone<double> backbone = ftn::make_backbone<double>(spec, 3, false);

    // warm the running statistics so eval mode is not at its initialization
    Rng warm(17);
    for (int i = 0; i < 4; ++i) {
        const Variable<double> xb(testutil::random_tensor<double>({4, 3, 16, 16}, warm));
        forward_source(backbone, xb, ftn::BnMode::kTrain);
    }

    auto task = ftn::make_task_adapter_set(backbone, "zero", backbone.classes, 2, 5);
    for (auto& a : task.adapters)
        if (a) ftn::zero_factors(*a);
    task.head_w.assign_value(backbone.head_w.value());
    task.head_b.assign_value(backbone.head_b.value());

    Rng rng(1234);
    std::size_t inputs = 0, identical = 0;
    for (int batch = 0; batch < 10; ++batch) {
        const Variable<double> x(testutil::random_tensor<double>({10, 3, 16, 16}, rng));
        const Tensor<double> adapted =
            forward_task(backbone, task, x, ftn::BnMode::kEval).value();
        const Tensor<double> plain = forward_source(backbone, x, ftn::BnMode::kEval).value();
        inputs += 10;
        if (adapted.bitwise_equal(plain)) identical += 10;
    }
    EXPECT_TRUE(report(3, "zero-rank adapters are bit-identical to the plain net",
                       inputs == 100 && identical == inputs));
    EXPECT_EQ(identical, inputs);
}

TEST(Acceptance, GradientsMatchFiniteDifferences) {
    // two adapted conv+bn blocks feeding one self-attention layer and a head;
    // every trainable leaf is checked at every coordinate
    Rng rng(29);
    Variable<double> w1(testutil::random_tensor<double>({8, 3, 3, 3}, rng, -0.4, 0.4), false);
    Variable<double> w2(testutil::random_tensor<double>({8, 8, 3, 3}, rng, -0.3, 0.3), false);
    ftn::CpAdapter<double> a1 = ftn::init_conv_adapter<double>(9, 3, 8, 6, 101);
    ftn::CpAdapter<double> a2 = ftn::init_conv_adapter<double>(9, 8, 8, 6, 102);
    ftn::CpAdapter<double> aq = ftn::init_attn_adapter<double>(8, 4, 2, 6, 1.0, 103);
    ftn::CpAdapter<double> av = ftn::init_attn_adapter<double>(8, 4, 2, 6, 1.0, 104);
    ftn::MhsaWeights<double> mhsa = ftn::make_mhsa_weights<double>(8, 2, 105, false);

    auto bn_with_random_affine = [&](std::size_t channels) {
        auto bn = ftn::make_batchnorm_params<double>(channels);
        Tensor<double> g({channels}), b({channels});
        for (std::size_t i = 0; i < channels; ++i) {
            g[i] = rng.uniform(0.6, 1.4);
            b[i] = rng.uniform(-0.5, 0.5);
        }
        bn.gamma.assign_value(g);
        bn.beta.assign_value(b);
        return bn;
    };
    ftn::BatchNormParams<double> bn1 = bn_with_random_affine(8);
    ftn::BatchNormParams<double> bn2 = bn_with_random_affine(8);
    Variable<double> head_w(testutil::random_tensor<double>({8, 4}, rng, -0.6, 0.6), true);
    Variable<double> head_b(testutil::random_tensor<double>({4}, rng, -0.2, 0.2), true);

    const Tensor<double> input = testutil::random_tensor<double>({1, 3, 6, 6}, rng);
    const std::vector<int> labels = {2};
    auto make_loss = [&] {
        const Variable<double> x(input, false);
        auto h1 = relu(batchnorm_forward(conv2d(x, apply_conv(w1, a1), 1, 1), bn1,
                                         ftn::BnMode::kTrain));
        auto h2 = relu(batchnorm_forward(conv2d(h1, apply_conv(w2, a2), 1, 1), bn2,
                                         ftn::BnMode::kTrain));
        auto seq = transpose(reshape(h2, {8, 36}));
        auto att = mhsa_forward(seq, mhsa, &aq, &av);
        auto feat = reshape(mean_rows(att), {1, 8});
        auto logits = add_bias(matmul(feat, head_w), head_b);
        return softmax_cross_entropy(logits, labels);
    };

    const std::vector<Variable<double>*> leaves = {
        &a1.mode1, &a1.mode2, &a1.mode3, &a2.mode1, &a2.mode2, &a2.mode3,
        &aq.mode1, &aq.mode2, &aq.mode3, &av.mode1, &av.mode2, &av.mode3,
        &bn1.gamma, &bn1.beta, &bn2.gamma, &bn2.beta, &head_w, &head_b};
    const testutil::GradCheckReport rep =
        testutil::check_gradients(leaves, make_loss, 1e-5, 1e-4, 1e-8);
    EXPECT_TRUE(report(4, "analytic gradients match finite differences",
                       rep.checked >= 500 && rep.failed == 0));
    EXPECT_GE(rep.checked, 500u);
    EXPECT_EQ(rep.failed, 0u) << "worst relative error " << rep.worst_rel;
}

TEST(Acceptance, PlantedRankRecovery) {
    std::size_t recovered = 0, fits = 0;
    bool monotone = true;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(ftn::mix64(4400, s));
        const Tensor<double> m1 = testutil::random_tensor<double>({2, 6}, rng);
        const Tensor<double> m2 = testutil::random_tensor<double>({2, 7}, rng);
        const Tensor<double> m3 = testutil::random_tensor<double>({2, 8}, rng);
        Tensor<double> x({6, 7, 8});
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 7; ++j)
                for (std::size_t l = 0; l < 8; ++l)
                    for (std::size_t q = 0; q < 2; ++q)
                        x.at({i, j, l}) += m1[q * 6 + i] * m2[q * 7 + j] * m3[q * 8 + l];

        ftn::CpAlsOptions opt;
        opt.seed = ftn::mix64(5500, s);
        const auto res = ftn::cp_als(x, 2, opt);
        ++fits;
        if (res.relative_error <= 1e-6) ++recovered;
        for (std::size_t i = 0; i + 1 < res.sweep_errors.size(); ++i) {
            if (res.sweep_errors[i + 1] > res.sweep_errors[i]) monotone = false;
        }
    }
    EXPECT_TRUE(report(5, "planted rank-2 tensors recovered, sweeps monotone",
                       fits == 100 && recovered >= 95 && monotone));
    EXPECT_GE(recovered, 95u);
    EXPECT_TRUE(monotone);
}

TEST(Acceptance, TruncationErrorMatchesFullSvd) {
    Rng rng(606);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t m = 2 + rng.index(11);  // 2..12
        const std::size_t n = 2 + rng.index(15);  // 2..16
        const std::size_t r = 1 + rng.index(std::min(m, n));
        const Tensor<double> t = testutil::random_tensor<double>({m, n}, rng);

        Eigen::MatrixXd a(m, n);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t q = 0; q < n; ++q) a(p, q) = t[p * n + q];
        const Eigen::VectorXd sigma = Eigen::JacobiSVD<Eigen::MatrixXd>(a).singularValues();
        double discarded = 0.0;
        for (Eigen::Index k = static_cast<Eigen::Index>(r); k < sigma.size(); ++k)
            discarded += sigma[k] * sigma[k];

        const double got = ftn::truncated_svd(t, r).error;
        worst = std::max(worst, std::abs(got - std::sqrt(discarded)));
    }
    EXPECT_TRUE(report(6, "truncation error equals discarded singular energy", worst <= 1e-10));
    EXPECT_LE(worst, 1e-10);
}

TEST(Acceptance, RankSweepTrend) {
    const std::array<std::size_t, 4> ranks = {1, 2, 4, 8};
    std::array<double, 4> means{};
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        means[i] = mean_stored_accuracy(rotation_runs(AdaptMode::kFtn, ranks[i]), "target");
    }
    const double finetune = mean_stored_accuracy(rotation_finetunes(), "source");

    bool nondecreasing = true;
    for (std::size_t i = 0; i + 1 < means.size(); ++i) {
        if (means[i + 1] < means[i] - 0.01) nondecreasing = false;
    }
    const bool close_to_finetune = finetune - means[3] <= 0.02;

    EXPECT_TRUE(report(7, "accuracy grows with rank and reaches the fine-tune",
                       nondecreasing && close_to_finetune));
    std::printf("    rank means %.4f %.4f %.4f %.4f, fine-tune %.4f\n", means[0], means[1],
                means[2], means[3], finetune);
    EXPECT_TRUE(nondecreasing);
    EXPECT_TRUE(close_to_finetune);
}

TEST(Acceptance, SequentialAdaptationNeverForgets) {
    const Checkpoint first =
        ftn::adapt_task(trained_base(), "rot", rotation_domain(), AdaptMode::kFtn, 2,
                        adapt_config(11));
    const Tensor<double> probe = first.f64("probe/rot/logits");
    const std::string digest = first.backbone_digest();

    const Checkpoint second =
        ftn::adapt_task(first, "hue", hue_domain(), AdaptMode::kFtn, 2, adapt_config(12));
    const Checkpoint third =
        ftn::adapt_task(second, "noise", noise_domain(), AdaptMode::kFtn, 2, adapt_config(13));

    // the first task's tensors and stored probe logits survive both later
    // adaptations bit for bit, and the backbone never moves
    bool tensors_intact = true;
    for (const std::string& name : first.names_with_prefix("task/rot/")) {
        if (!third.f64(name).bitwise_equal(first.f64(name))) tensors_intact = false;
    }
    const bool probe_intact = third.f64("probe/rot/logits").bitwise_equal(probe);
    const bool digest_intact =
        second.backbone_digest() == digest && third.backbone_digest() == digest;

    // and those bytes still reproduce the recorded logits when re-run
    ftn::Backbone<double> backbone = ftn::unpack_backbone(third, false);
    ftn::TaskAdapterSet<double> rot = ftn::unpack_task(third, backbone, "rot");
    const Tensor<double> replayed =
        ftn::detail::eval_logits(backbone, &rot, ftn::detail::probe_batch(rotation_domain()));
    const bool replay_intact = replayed.bitwise_equal(probe);

    EXPECT_TRUE(report(8, "three sequential domains, first task bit-identical",
                       tensors_intact && probe_intact && digest_intact && replay_intact));
    EXPECT_TRUE(tensors_intact);
    EXPECT_TRUE(probe_intact);
    EXPECT_TRUE(digest_intact);
    EXPECT_TRUE(replay_intact);
}

TEST(Acceptance, PruningSweepIsMonotone) {
    const std::vector<Checkpoint>& runs = rotation_runs(AdaptMode::kFtn, 4);

    double hi = 0.0;
    for (const auto& c : runs) {
        for (double n : ftn::prune_task(c, "target", 0.0).layer_norms) hi = std::max(hi, n);
    }
    hi *= 1.01;

    constexpr int kSteps = 8;
    bool removed_monotone = true;
    bool accuracy_monotone = true;
    std::vector<std::size_t> prev_removed(runs.size(), 0);
    double prev_acc = 1.0;
    std::printf("    threshold sweep:");
    for (int k = 0; k < kSteps; ++k) {
        const double threshold = hi * static_cast<double>(k) / (kSteps - 1);
        double acc = 0.0;
        for (std::size_t s = 0; s < runs.size(); ++s) {
            const ftn::PrunedCheckpoint pruned = ftn::prune_task(runs[s], "target", threshold);
            if (pruned.removed.size() < prev_removed[s]) removed_monotone = false;
            prev_removed[s] = pruned.removed.size();
            acc += ftn::evaluate_stored(pruned.ckpt, "target").accuracy;
        }
        acc /= static_cast<double>(runs.size());
        if (k > 0 && acc > prev_acc + 0.01) accuracy_monotone = false;
        prev_acc = acc;
        std::printf(" %.3f", acc);
    }
    std::printf("\n");

    bool all_removed = true;
    for (std::size_t s = 0; s < runs.size(); ++s) {
        if (prev_removed[s] != 3) all_removed = false;
    }
    EXPECT_TRUE(report(9, "pruning removes monotonically, accuracy never rebounds",
                       removed_monotone && accuracy_monotone && all_removed));
    EXPECT_TRUE(removed_monotone);
    EXPECT_TRUE(accuracy_monotone);
    EXPECT_TRUE(all_removed);
}

TEST(Acceptance, FactorizationErrorShrinksWithRank) {
    const ftn::DeltaSet ds = ftn::extract_deltas(rotation_finetunes()[0], trained_base());
    const std::array<std::size_t, 4> ranks = {1, 2, 4, 8};

    bool shrinking = true;
    bool aggregates_exact = true;
    for (const std::string method : {"cp", "tt", "svd"}) {
        double prev = std::numeric_limits<double>::infinity();
        std::printf("    %-3s rel errors:", method.c_str());
        for (std::size_t r : ranks) {
            const ftn::FactorizationReport rep = ftn::factorize_deltas(ds, method, r, 0);
            if (rep.aggregate.mean_rel_error > prev) shrinking = false;
            prev = rep.aggregate.mean_rel_error;
            std::printf(" %.4f", rep.aggregate.mean_rel_error);

            double mean = 0.0;
            for (const auto& row : rep.rows) mean += row.rel_error;
            mean /= static_cast<double>(rep.rows.size());
            double var = 0.0;
            for (const auto& row : rep.rows)
                var += (row.rel_error - mean) * (row.rel_error - mean);
            var /= static_cast<double>(rep.rows.size());
            if (rep.aggregate.mean_rel_error != mean ||
                rep.aggregate.std_rel_error != std::sqrt(var)) {
                aggregates_exact = false;
            }
        }
        std::printf("\n");
    }
    EXPECT_TRUE(report(10, "factorization error nonincreasing in rank, report exact",
                       shrinking && aggregates_exact));
    EXPECT_TRUE(shrinking);
    EXPECT_TRUE(aggregates_exact);
}

TEST(Acceptance, CheckpointRoundTripAndRejection) {
    Checkpoint c;
    c.manifest["note"] = "round trip";
    Rng rng(77);
    c.put("a/weight", testutil::random_tensor<double>({4, 3, 2}, rng));
    c.put("b/bias", testutil::random_tensor<float>({5}, rng));
    Tensor<double> awkward({4});
    awkward[0] = std::numeric_limits<double>::quiet_NaN();
    awkward[1] = -0.0;
    awkward[2] = std::numeric_limits<double>::infinity();
    awkward[3] = std::numeric_limits<double>::denorm_min();
    c.put("c/awkward", awkward);

    const std::vector<std::uint8_t> bytes = c.serialize();
    const Checkpoint back = Checkpoint::deserialize(bytes);
    bool round_trip = back.tensor_count() == c.tensor_count();
    for (const auto& [name, value] : c.tensors()) {
        const bool same = std::visit(
            [&](const auto& t) {
                using TT = std::decay_t<decltype(t)>;
                constexpr bool is_f32 = std::is_same_v<TT, Tensor<float>>;
                if constexpr (is_f32) return back.f32(name).bitwise_equal(t);
                else return back.f64(name).bitwise_equal(t);
            },
            value);
        if (!same) round_trip = false;
    }

    const auto code_of = [](std::vector<std::uint8_t> damaged) {
        try {
            Checkpoint::deserialize(damaged);
        } catch (const ftn::CheckpointReadError& e) {
            return e.code();
        }
        return CheckpointError::kBadMagic;  // unreachable on the cases below
    };

    std::vector<std::uint8_t> corrupt = bytes;
    corrupt[corrupt.size() - 3] ^= 0x40;
    std::vector<std::uint8_t> truncated = bytes;
    truncated.resize(truncated.size() - 7);
    std::vector<std::uint8_t> magic = bytes;
    magic[0] = 'X';
    std::vector<std::uint8_t> version = bytes;
    version[4] = 9;

    const bool rejects = code_of(corrupt) == CheckpointError::kBadDigest &&
                         code_of(truncated) == CheckpointError::kBadDigest &&
                         code_of(magic) == CheckpointError::kBadMagic &&
                         code_of(version) == CheckpointError::kBadVersion;

    EXPECT_TRUE(report(11, "checkpoints round-trip bit-exactly and reject damage",
                       round_trip && rejects));
    EXPECT_TRUE(round_trip);
    EXPECT_TRUE(rejects);
}
