// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <vector>

#include "dalg/losses.hpp"
#include "dalg/optim.hpp"
#include "dalg/retrieval.hpp"

namespace dalg {

struct TrainConfig {
    double base_lr = 7.5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t batch_size = 16;
    std::int64_t total_steps = 500;
    std::int64_t warmup_steps = 50;
    double local_loss_weight = 1.0;
    std::uint64_t seed = 42;
    std::int64_t map_k = 5;  // retrieval depth of the per-epoch evaluation

    void validate() const;
};

struct TrainResult {
    double initial_total_loss = 0.0;
    double final_total_loss = 0.0;
    double train_accuracy = 0.0;
    double final_map = 0.0;
    std::int64_t steps_run = 0;
};

/// Minibatch loop over the synthetic training split; logs one ndjson record
/// per step (step, lr, global_loss, local_loss, wall_ms) and one per epoch
/// (epoch, mean losses, retrieval mAP on the gallery/query split). The
/// checkpoint-relevant state is a pure function of (model seed, data, config).
TrainResult train_model(DalgModel& model, const SyntheticSpec& data, const DatasetSplits& splits,
                        const TrainConfig& cfg, std::ostream* log = nullptr);

/// Margin-free classification accuracy of the descriptor against the ArcFace
/// class directions.
double classification_accuracy(DalgModel& model, const SyntheticSpec& data,
                               const std::vector<Sample>& samples, std::int64_t batch_size = 16);

/// Extracts gallery and query descriptors and reports mAP@k with same-class
/// positives.
double retrieval_map(DalgModel& model, const SyntheticSpec& data, const DatasetSplits& splits,
                     std::int64_t k);

}  // namespace dalg
