#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ftn/data.hpp"
#include "test_util.hpp"

using ftn::Dataset;
using ftn::DomainTransform;
using ftn::Split;
using ftn::SyntheticDomainConfig;

namespace {

SyntheticDomainConfig base_config() {
    SyntheticDomainConfig cfg;
    cfg.class_count = 4;
    cfg.train_count = 64;
    cfg.test_count = 32;
    cfg.seed = 9;
    return cfg;
}

double image_diff(const Dataset& a, const Dataset& b) {
    return testutil::max_abs_diff(a.images, b.images);
}

}  // namespace

TEST(Data, GenerationIsDeterministic) {
    const SyntheticDomainConfig cfg = base_config();
    const Dataset a = make_domain_split(cfg, Split::kTrain);
    const Dataset b = make_domain_split(cfg, Split::kTrain);
    EXPECT_TRUE(a.images.bitwise_equal(b.images));
    EXPECT_EQ(a.labels, b.labels);
}

TEST(Data, SplitsAreDisjointStreams) {
    const SyntheticDomainConfig cfg = base_config();
    const Dataset train = make_domain_split(cfg, Split::kTrain);
    const Dataset test = make_domain_split(cfg, Split::kTest);
    // same index, different split tag → different image
    const std::size_t elems = ftn::kImageChannels * ftn::kImageSide * ftn::kImageSide;
    for (std::size_t i : {std::size_t{0}, std::size_t{7}, std::size_t{31}}) {
        double diff = 0.0;
        for (std::size_t e = 0; e < elems; ++e) {
            diff = std::max(diff, std::abs(train.images.data()[i * elems + e] -
                                           test.images.data()[i * elems + e]));
        }
        EXPECT_GT(diff, 1e-3) << "sample " << i;
    }
}

TEST(Data, ShapesAndRanges) {
    const SyntheticDomainConfig cfg = base_config();
    const Dataset ds = make_domain_split(cfg, Split::kTrain);
    EXPECT_TRUE(ds.images.same_shape(ftn::Shape{64, 3, 16, 16}));
    EXPECT_EQ(ds.labels.size(), 64u);
    for (std::size_t i = 0; i < ds.images.numel(); ++i) {
        EXPECT_GE(ds.images.data()[i], 0.0);
        EXPECT_LE(ds.images.data()[i], 1.0);
    }
}

TEST(Data, LabelsAreBalanced) {
    const SyntheticDomainConfig cfg = base_config();
    const Dataset ds = make_domain_split(cfg, Split::kTrain);
    std::size_t counts[4] = {0, 0, 0, 0};
    for (std::size_t y : ds.labels) {
        ASSERT_LT(y, 4u);
        ++counts[y];
    }
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(counts[c], 16u);
}

TEST(Data, TransformsActuallyTransform) {
    const SyntheticDomainConfig plain = base_config();
    const Dataset identity = make_domain_split(plain, Split::kTrain);

    for (auto [t, mag] : {std::pair{DomainTransform::kHueRotation, 120.0},
                          std::pair{DomainTransform::kSpatialRotation, 75.0},
                          std::pair{DomainTransform::kAdditiveNoise, 0.1}}) {
        SyntheticDomainConfig cfg = plain;
        cfg.transform = t;
        cfg.magnitude = mag;
        const Dataset shifted = make_domain_split(cfg, Split::kTrain);
        EXPECT_EQ(shifted.labels, identity.labels) << ftn::domain_transform_name(t);
        EXPECT_GT(image_diff(shifted, identity), 0.01) << ftn::domain_transform_name(t);
    }
}

TEST(Data, MagnitudeGradesTheShift) {
    SyntheticDomainConfig mild = base_config();
    mild.transform = DomainTransform::kAdditiveNoise;
    mild.magnitude = 0.01;
    SyntheticDomainConfig harsh = mild;
    harsh.magnitude = 0.2;
    const Dataset identity = make_domain_split(base_config(), Split::kTrain);
    EXPECT_LT(image_diff(make_domain_split(mild, Split::kTrain), identity),
              image_diff(make_domain_split(harsh, Split::kTrain), identity));
}

TEST(Data, ConfigRoundTripsThroughJson) {
    SyntheticDomainConfig cfg = base_config();
    cfg.transform = DomainTransform::kSpatialRotation;
    cfg.magnitude = 75.0;
    const SyntheticDomainConfig back = ftn::parse_domain_config(ftn::domain_config_json(cfg));
    EXPECT_EQ(back.transform, cfg.transform);
    EXPECT_EQ(back.magnitude, cfg.magnitude);
    EXPECT_EQ(back.class_count, cfg.class_count);
    EXPECT_EQ(back.train_count, cfg.train_count);
    EXPECT_EQ(back.test_count, cfg.test_count);
    EXPECT_EQ(back.seed, cfg.seed);

    const Dataset a = make_domain_split(cfg, Split::kTest);
    const Dataset b = make_domain_split(back, Split::kTest);
    EXPECT_TRUE(a.images.bitwise_equal(b.images));
}

TEST(Data, RejectsBadConfigs) {
    SyntheticDomainConfig cfg = base_config();
    cfg.class_count = 1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = base_config();
    cfg.class_count = 5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = base_config();
    cfg.train_count = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = base_config();
    cfg.transform = DomainTransform::kAdditiveNoise;
    cfg.magnitude = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.magnitude = -0.1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW(ftn::parse_domain_transform("sepia"), std::invalid_argument);
}

TEST(Data, GatherPicksRows) {
    const SyntheticDomainConfig cfg = base_config();
    const Dataset ds = make_domain_split(cfg, Split::kTrain);
    const Dataset picked = ftn::gather(ds, {5, 0, 5});
    EXPECT_TRUE(picked.images.same_shape(ftn::Shape{3, 3, 16, 16}));
    EXPECT_EQ(picked.labels[0], ds.labels[5]);
    EXPECT_EQ(picked.labels[1], ds.labels[0]);
    const std::size_t elems = 3 * 16 * 16;
    for (std::size_t e = 0; e < elems; ++e) {
        EXPECT_EQ(picked.images.data()[e], ds.images.data()[5 * elems + e]);
        EXPECT_EQ(picked.images.data()[2 * elems + e], picked.images.data()[e]);
    }
    EXPECT_THROW(ftn::gather(ds, {64}), std::out_of_range);
}
