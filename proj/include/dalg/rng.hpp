// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "dalg/tensor.hpp"

namespace dalg {

/// Deterministic random source. All distribution transforms are implemented
/// locally (std:: distributions are not bit-stable across standard libraries),
/// so identical seeds give identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    std::int64_t uniform_int(std::int64_t n);  // [0, n)
    double normal();                       // standard normal, Box-Muller
    /// Normal(0, std) resampled until |x| <= 2*std.
    double trunc_normal(double std_dev);

    Tensor uniform_tensor(Shape shape, double lo, double hi);
    Tensor normal_tensor(Shape shape, double std_dev);
    Tensor trunc_normal_tensor(Shape shape, double std_dev);

    /// Stream derivation for pure-function generation of sample i of class c.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

private:
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace dalg
