// SPDX-License-Identifier: Apache-2.0

#include "dalg/rng.hpp"

#include <cmath>

namespace dalg {

namespace {

// splitmix64; full-period, trivially seedable.
std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed ^ 0x853c49e6748fea9bULL) {}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
}

double Rng::normal() {
    if (have_cached_) {
        have_cached_ = false;
        return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
}

double Rng::trunc_normal(double std_dev) {
    for (;;) {
        const double x = normal() * std_dev;
        if (std::abs(x) <= 2.0 * std_dev) return x;
    }
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
}

Tensor Rng::normal_tensor(Shape shape, double std_dev) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = normal() * std_dev;
    return t;
}

Tensor Rng::trunc_normal_tensor(Shape shape, double std_dev) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = trunc_normal(std_dev);
    return t;
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = seed;
    s = splitmix64(s) ^ (a * 0xd6e8feb86659fd93ULL);
    s = splitmix64(s) ^ (b * 0xca5a826395121157ULL);
    return splitmix64(s);
}

}  // namespace dalg
