// SPDX-License-Identifier: Apache-2.0

#include "dalg/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace dalg {

namespace {
constexpr double kTwoPi = 6.28318530717958647692;
}

void SyntheticSpec::validate() const {
    if (n_classes < 1 || images_per_class < 1) throw SchemaError("synthetic: empty dataset");
    if (image_size < 8) throw SchemaError("synthetic: image size must be >= 8");
    if (noise_std < 0.0) throw SchemaError("synthetic: negative noise std");
    if (max_translation < 0 || max_translation >= image_size) {
        throw SchemaError("synthetic: translation out of range");
    }
}

std::string synthetic_id(std::int64_t cls, std::int64_t index) {
    return "c" + std::to_string(cls) + "_i" + std::to_string(index);
}

namespace {

// Class base pattern, before per-sample perturbations.
Tensor base_pattern(const SyntheticSpec& spec, std::int64_t cls) {
    const std::int64_t S = spec.image_size;
    Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(cls) + 1, 0x5eed));
    Tensor img(Shape{S, S, 3});

    // Class color identity: evenly spaced points on a hue circle, so class
    // membership survives translation and pixel noise.
    const double hue = kTwoPi * static_cast<double>(cls) / static_cast<double>(spec.n_classes);
    double dc[3];
    for (int c = 0; c < 3; ++c) dc[c] = 0.16 * std::cos(hue + kTwoPi * c / 3.0);

    // Low-frequency color waves.
    double fx[3], fy[3], phase[3], amp[3];
    for (int c = 0; c < 3; ++c) {
        fx[c] = 1.0 + static_cast<double>(rng.uniform_int(2));
        fy[c] = 1.0 + static_cast<double>(rng.uniform_int(2));
        phase[c] = rng.uniform(0.0, kTwoPi);
        amp[c] = rng.uniform(0.12, 0.22);
    }
    for (std::int64_t y = 0; y < S; ++y) {
        for (std::int64_t x = 0; x < S; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double wave = std::cos(kTwoPi * (fx[c] * x + fy[c] * y) / static_cast<double>(S) +
                                             phase[c]);
                img.at({y, x, c}) = 0.5 + dc[c] + amp[c] * wave;
            }
        }
    }

    // Class-unique geometric layout: a bright rectangle placed by the class
    // stream, plus a dark stripe with class-dependent period.
    const std::int64_t rw = S / 4 + rng.uniform_int(S / 4);
    const std::int64_t rh = S / 4 + rng.uniform_int(S / 4);
    const std::int64_t ry = rng.uniform_int(S - rh);
    const std::int64_t rx = rng.uniform_int(S - rw);
    const int bright_channel = static_cast<int>(rng.uniform_int(3));
    for (std::int64_t y = ry; y < ry + rh; ++y) {
        for (std::int64_t x = rx; x < rx + rw; ++x) {
            img.at({y, x, bright_channel}) = 0.95;
            img.at({y, x, (bright_channel + 1) % 3}) *= 0.4;
        }
    }
    const std::int64_t period = 3 + rng.uniform_int(4);
    const std::int64_t stripe_channel = rng.uniform_int(3);
    for (std::int64_t y = 0; y < S; ++y) {
        for (std::int64_t x = 0; x < S; ++x) {
            if ((x + 2 * y) % (period * 2) < period) {
                img.at({y, x, static_cast<std::int64_t>(stripe_channel)}) *= 0.6;
            }
        }
    }
    return img;
}

}  // namespace

Tensor synthetic_image(const SyntheticSpec& spec, std::int64_t cls, std::int64_t index) {
    spec.validate();
    if (cls < 0 || cls >= spec.n_classes || index < 0 || index >= spec.images_per_class) {
        throw Error("synthetic_image: sample (" + std::to_string(cls) + ", " + std::to_string(index) +
                    ") outside the spec");
    }
    const std::int64_t S = spec.image_size;
    Tensor base = base_pattern(spec, cls);
    Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(cls) + 1,
                     static_cast<std::uint64_t>(index) + 0x1000));
    const std::int64_t T = spec.max_translation;
    const std::int64_t dy = T > 0 ? rng.uniform_int(2 * T + 1) - T : 0;
    const std::int64_t dx = T > 0 ? rng.uniform_int(2 * T + 1) - T : 0;

    Tensor img(Shape{S, S, 3});
    for (std::int64_t y = 0; y < S; ++y) {
        const std::int64_t sy = ((y - dy) % S + S) % S;
        for (std::int64_t x = 0; x < S; ++x) {
            const std::int64_t sx = ((x - dx) % S + S) % S;
            for (std::int64_t c = 0; c < 3; ++c) {
                double v = base.at({sy, sx, c});
                if (spec.noise_std > 0.0) v += rng.normal() * spec.noise_std;
                img.at({y, x, c}) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return img;
}

Tensor synthetic_batch(const SyntheticSpec& spec, const std::vector<Sample>& samples) {
    if (samples.empty()) throw Error("synthetic_batch: no samples");
    const std::int64_t S = spec.image_size;
    Tensor batch(Shape{static_cast<std::int64_t>(samples.size()), S, S, 3});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor img = synthetic_image(spec, samples[i].label, samples[i].index);
        std::copy(img.data(), img.data() + img.size(), batch.data() + static_cast<std::int64_t>(i) * img.size());
    }
    return batch;
}

DatasetSplits split_synthetic(const SyntheticSpec& spec, std::int64_t gallery_per_class,
                              std::int64_t query_per_class) {
    spec.validate();
    if (gallery_per_class < 0 || query_per_class < 0 ||
        gallery_per_class + query_per_class >= spec.images_per_class) {
        throw SchemaError("split: gallery " + std::to_string(gallery_per_class) + " + query " +
                          std::to_string(query_per_class) + " must leave training images from " +
                          std::to_string(spec.images_per_class) + " per class");
    }
    DatasetSplits splits;
    const std::int64_t train_n = spec.images_per_class - gallery_per_class - query_per_class;
    for (std::int64_t cls = 0; cls < spec.n_classes; ++cls) {
        for (std::int64_t i = 0; i < spec.images_per_class; ++i) {
            Sample s{synthetic_id(cls, i), cls, i};
            if (i < train_n) {
                splits.train.push_back(std::move(s));
            } else if (i < train_n + gallery_per_class) {
                splits.gallery.push_back(std::move(s));
            } else {
                splits.query.push_back(std::move(s));
            }
        }
    }
    return splits;
}

}  // namespace dalg
