#pragma once

// Procedural image domains for desk-scale multi-domain experiments. Every
// sample is a 3x16x16 image of one shape (disk, square, cross, triangle) on a
// plain background, produced by a counter-based stream: sample i of a split
// draws from Rng(mix64(seed, split_tag, i)) and from nothing else. Train and
// test use different split tags, so the splits are disjoint by construction
// and any (seed, split, index) triple regenerates its sample bit-for-bit.
//
// A domain is the base family plus one distortion, graded by `magnitude`:
// hue rotation spins RGB values around the gray axis, spatial rotation spins
// the shape geometry around its center (both take magnitude in degrees), and
// additive noise perturbs pixels (magnitude is the noise standard deviation).
// Distortion parameters come from the same per-sample stream, so domains are
// as deterministic as the base images.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftn/rng.hpp"
#include "ftn/tensor.hpp"

namespace ftn {

constexpr std::size_t kImageChannels = 3;
constexpr std::size_t kImageSide = 16;

enum class DomainTransform { kIdentity, kHueRotation, kSpatialRotation, kAdditiveNoise };

inline const char* domain_transform_name(DomainTransform t) {
    switch (t) {
        case DomainTransform::kIdentity: return "identity";
        case DomainTransform::kHueRotation: return "hue-rotation";
        case DomainTransform::kSpatialRotation: return "spatial-rotation";
        case DomainTransform::kAdditiveNoise: return "additive-noise";
    }
    return "unknown";
}

inline DomainTransform parse_domain_transform(const std::string& name) {
    if (name == "identity") return DomainTransform::kIdentity;
    if (name == "hue-rotation") return DomainTransform::kHueRotation;
    if (name == "spatial-rotation") return DomainTransform::kSpatialRotation;
    if (name == "additive-noise") return DomainTransform::kAdditiveNoise;
    throw std::invalid_argument("unknown domain transform \"" + name + "\"");
}

struct SyntheticDomainConfig {
    DomainTransform transform = DomainTransform::kIdentity;
    double magnitude = 0.0;
    std::size_t class_count = 4;
    std::size_t train_count = 256;
    std::size_t test_count = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (class_count < 2 || class_count > 4) {
            throw std::invalid_argument("domain: class_count must be 2..4 (one per shape)");
        }
        if (train_count == 0 || test_count == 0) {
            throw std::invalid_argument("domain: sample counts must be positive");
        }
        if (magnitude < 0.0) throw std::invalid_argument("domain: magnitude must be >= 0");
        if (transform != DomainTransform::kIdentity && magnitude == 0.0) {
            throw std::invalid_argument("domain: non-identity transform needs a magnitude");
        }
    }
};

inline SyntheticDomainConfig parse_domain_config(const nlohmann::json& j) {
    SyntheticDomainConfig cfg;
    cfg.transform = parse_domain_transform(j.value("transform", "identity"));
    cfg.magnitude = j.value("magnitude", 0.0);
    cfg.class_count = j.value("classes", std::size_t{4});
    cfg.train_count = j.value("train_count", std::size_t{256});
    cfg.test_count = j.value("test_count", std::size_t{64});
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.validate();
    return cfg;
}

inline nlohmann::json domain_config_json(const SyntheticDomainConfig& cfg) {
    return {{"transform", domain_transform_name(cfg.transform)}, {"magnitude", cfg.magnitude},
            {"classes", cfg.class_count},                        {"train_count", cfg.train_count},
            {"test_count", cfg.test_count},                      {"seed", cfg.seed}};
}

struct Dataset {
    Tensor<double> images;  // [N, 3, 16, 16]
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

enum class Split : std::uint64_t { kTrain = 1, kTest = 2 };

namespace detail {

// Shape mask in coordinates already rotated into the shape's frame. Pixel
// centers are at integer coordinates; sizes are tuned so every shape fits
// inside the 16x16 canvas across the whole center/size range below.
inline bool shape_covers(std::size_t cls, double dx, double dy, double r) {
    switch (cls) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
        case 2: {
            const double arm = r * 0.4;
            return (std::abs(dx) <= arm && std::abs(dy) <= r) ||
                   (std::abs(dy) <= arm && std::abs(dx) <= r);
        }
        default: {
            if (dy < -r || dy > r) return false;
            return std::abs(dx) <= (dy + r) * 0.55;
        }
    }
}

inline void render_sample(Rng& rng, DomainTransform transform, double magnitude,
                          std::size_t cls, double* out) {
    double bg[3], fg[3];
    for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.05, 0.35);
    for (int c = 0; c < 3; ++c) fg[c] = rng.uniform(0.60, 0.95);
    const double cx = rng.uniform(6.0, 9.0);
    const double cy = rng.uniform(6.0, 9.0);
    const double r = rng.uniform(3.0, 5.0);

    double angle = 0.0;
    if (transform == DomainTransform::kSpatialRotation) {
        angle = magnitude * rng.uniform(0.75, 1.25) * (std::acos(-1.0) / 180.0);
    }
    const double ca = std::cos(angle), sa = std::sin(angle);

    for (std::size_t y = 0; y < kImageSide; ++y) {
        for (std::size_t x = 0; x < kImageSide; ++x) {
            const double rx = ca * (x - cx) + sa * (y - cy);
            const double ry = -sa * (x - cx) + ca * (y - cy);
            const bool inside = shape_covers(cls, rx, ry, r);
            for (std::size_t c = 0; c < 3; ++c) {
                out[(c * kImageSide + y) * kImageSide + x] = inside ? fg[c] : bg[c];
            }
        }
    }

    if (transform == DomainTransform::kHueRotation) {
        // Rodrigues rotation of the RGB vector about the gray axis (1,1,1)/√3.
        const double theta =
            magnitude * rng.uniform(0.8, 1.2) * (std::acos(-1.0) / 180.0);
        const double c = std::cos(theta), s = std::sin(theta);
        const double k = 1.0 / std::sqrt(3.0);
        double m[3][3];
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                m[i][j] = (i == j ? c : 0.0) + (1.0 - c) * k * k;
            }
        }
        m[0][1] -= s * k;
        m[0][2] += s * k;
        m[1][0] += s * k;
        m[1][2] -= s * k;
        m[2][0] -= s * k;
        m[2][1] += s * k;
        for (std::size_t p = 0; p < kImageSide * kImageSide; ++p) {
            double v[3];
            for (int i = 0; i < 3; ++i) v[i] = out[i * kImageSide * kImageSide + p];
            for (int i = 0; i < 3; ++i) {
                double acc = 0.0;
                for (int j = 0; j < 3; ++j) acc += m[i][j] * v[j];
                out[i * kImageSide * kImageSide + p] = std::min(1.0, std::max(0.0, acc));
            }
        }
    } else if (transform == DomainTransform::kAdditiveNoise) {
        for (std::size_t i = 0; i < 3 * kImageSide * kImageSide; ++i) {
            out[i] = std::min(1.0, std::max(0.0, out[i] + rng.normal(0.0, magnitude)));
        }
    }
}

}  // namespace detail

// Labels cycle through the classes, so every split is balanced up to one
// sample; everything else about sample i comes from its own seeded stream.
inline Dataset make_domain_split(const SyntheticDomainConfig& cfg, Split split) {
    cfg.validate();
    const std::size_t n = split == Split::kTrain ? cfg.train_count : cfg.test_count;
    Dataset ds{Tensor<double>({n, kImageChannels, kImageSide, kImageSide}),
               std::vector<std::size_t>(n)};
    const std::size_t sample_elems = kImageChannels * kImageSide * kImageSide;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix64(cfg.seed, static_cast<std::uint64_t>(split), i));
        ds.labels[i] = i % cfg.class_count;
        detail::render_sample(rng, cfg.transform, cfg.magnitude, ds.labels[i],
                              ds.images.data() + i * sample_elems);
    }
    return ds;
}

// Gathers rows of a dataset into a batch tensor plus its labels.
inline Dataset gather(const Dataset& ds, const std::vector<std::size_t>& indices) {
    const std::size_t sample_elems = kImageChannels * kImageSide * kImageSide;
    Dataset out{Tensor<double>({indices.size(), kImageChannels, kImageSide, kImageSide}),
                std::vector<std::size_t>(indices.size())};
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ds.size()) throw std::out_of_range("gather: index past dataset end");
        const double* src = ds.images.data() + indices[i] * sample_elems;
        std::copy(src, src + sample_elems, out.images.data() + i * sample_elems);
        out.labels[i] = ds.labels[indices[i]];
    }
    return out;
}

}  // namespace ftn
