// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "dalg/param.hpp"

namespace dalg {

/// Linear warmup to base_lr, then cosine decay to zero at total_steps.
struct LrSchedule {
    double base_lr = 7.5e-4;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;

    double at(std::int64_t step) const;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay; decay is skipped for parameters flagged
/// decay == false (norm gains and biases).
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

    /// Applies one update from the accumulated gradients.
    void step(double lr);

    std::int64_t steps_taken() const { return t_; }

private:
    std::vector<Parameter*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace dalg
