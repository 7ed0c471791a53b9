// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dalg/rng.hpp"
#include "dalg/tensor.hpp"

namespace dalg {

/// Procedural labeled image set: each class owns a seeded base pattern
/// (low-frequency color waves plus a class-placed bright rectangle); samples
/// perturb it with a small toroidal translation and Gaussian pixel noise.
/// Generation is a pure function of (spec, class, index).
struct SyntheticSpec {
    std::int64_t n_classes = 8;
    std::int64_t images_per_class = 20;
    std::int64_t image_size = 32;
    double noise_std = 0.05;
    std::int64_t max_translation = 2;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Sample {
    std::string id;
    std::int64_t label = 0;
    std::int64_t index = 0;
};

std::string synthetic_id(std::int64_t cls, std::int64_t index);

/// H x W x 3 image with values in [0, 1].
Tensor synthetic_image(const SyntheticSpec& spec, std::int64_t cls, std::int64_t index);

/// Stacks samples into a B x H x W x 3 batch tensor.
Tensor synthetic_batch(const SyntheticSpec& spec, const std::vector<Sample>& samples);

struct DatasetSplits {
    std::vector<Sample> train, gallery, query;
};

/// Deterministic per-class split: the first images train, the next
/// gallery_per_class build the gallery, the following query_per_class are
/// held-out queries.
DatasetSplits split_synthetic(const SyntheticSpec& spec, std::int64_t gallery_per_class,
                              std::int64_t query_per_class);

}  // namespace dalg
