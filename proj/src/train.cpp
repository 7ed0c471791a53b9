// SPDX-License-Identifier: Apache-2.0

#include "dalg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

namespace dalg {

void TrainConfig::validate() const {
    if (base_lr <= 0.0) throw SchemaError("train: base_lr must be positive");
    if (weight_decay < 0.0) throw SchemaError("train: negative weight decay");
    if (batch_size < 1) throw SchemaError("train: batch size must be >= 1");
    if (total_steps < 1) throw SchemaError("train: total steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
        throw SchemaError("train: warmup steps must lie in [0, total_steps)");
    }
    if (local_loss_weight < 0.0) throw SchemaError("train: negative local loss weight");
    if (map_k < 1) throw SchemaError("train: map_k must be >= 1");
}

namespace {

std::vector<std::int64_t> labels_of(const std::vector<Sample>& samples) {
    std::vector<std::int64_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
}

}  // namespace

double retrieval_map(DalgModel& model, const SyntheticSpec& data, const DatasetSplits& splits,
                     std::int64_t k) {
    Descriptors gallery = extract_descriptors(model, data, splits.gallery);
    Descriptors queries = extract_descriptors(model, data, splits.query);
    GalleryIndex index = GalleryIndex::build(gallery);
    GroundTruth gt = class_ground_truth(splits.query, splits.gallery);
    EvalReport report = evaluate(index, queries, gt, Protocol::kMedium, k, {});
    return report.map;
}

double classification_accuracy(DalgModel& model, const SyntheticSpec& data,
                               const std::vector<Sample>& samples, std::int64_t batch_size) {
    Descriptors d = extract_descriptors(model, data, samples, batch_size);
    const Tensor& w = model.arcface.class_weights.value;  // n_classes x C
    const std::int64_t n_classes = w.extent(0), C = w.extent(1);
    std::vector<double> wnorm(static_cast<std::size_t>(n_classes));
    for (std::int64_t j = 0; j < n_classes; ++j) {
        double n2 = 0.0;
        for (std::int64_t c = 0; c < C; ++c) n2 += w[j * C + c] * w[j * C + c];
        wnorm[static_cast<std::size_t>(j)] = std::sqrt(n2);
    }
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::int64_t best = 0;
        double best_cos = -2.0;
        for (std::int64_t j = 0; j < n_classes; ++j) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                dot += d.rows[static_cast<std::int64_t>(i) * C + c] * w[j * C + c];
            }
            const double cs = dot / wnorm[static_cast<std::size_t>(j)];
            if (cs > best_cos) {
                best_cos = cs;
                best = j;
            }
        }
        if (best == samples[i].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train_model(DalgModel& model, const SyntheticSpec& data, const DatasetSplits& splits,
                        const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    if (splits.train.empty()) throw Error("train: empty training split");

    std::vector<Parameter*> params = model.parameters();
    AdamW optimizer(params, AdamWConfig{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
    LrSchedule schedule{cfg.base_lr, cfg.warmup_steps, cfg.total_steps};

    TrainResult result;
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x7261696e, 0));
    std::vector<std::size_t> order(splits.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::int64_t step = 0, epoch = 0;
    double epoch_global = 0.0, epoch_local = 0.0;
    std::int64_t epoch_steps = 0;
    std::size_t cursor = order.size();  // triggers a shuffle on the first step

    using clock = std::chrono::steady_clock;
    while (step < cfg.total_steps) {
        if (cursor >= order.size()) {
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(
                                            static_cast<std::int64_t>(i)))]);
            }
            cursor = 0;
        }
        std::vector<Sample> batch;
        while (batch.size() < static_cast<std::size_t>(cfg.batch_size) && cursor < order.size()) {
            batch.push_back(splits.train[order[cursor++]]);
        }

        const auto t0 = clock::now();
        double global_v = 0.0, local_v = 0.0, total_v = 0.0;
        try {
            Graph g;
            Value images = g.constant(synthetic_batch(data, batch));
            DalgModel::Outputs out = model.forward(g, images);
            DalgLoss loss = dalg_loss(model, out, labels_of(batch), cfg.local_loss_weight);
            global_v = loss.global_loss.scalar();
            local_v = loss.local_loss.scalar();
            total_v = loss.total.scalar();
            model.zero_grad();
            g.backward(loss.total);
        } catch (const NumericError& e) {
            throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const double lr = schedule.at(step);
        optimizer.step(lr);
        const double wall_ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();

        if (step == 0) result.initial_total_loss = total_v;
        result.final_total_loss = total_v;
        epoch_global += global_v;
        epoch_local += local_v;
        ++epoch_steps;
        if (log) {
            (*log) << "{\"step\":" << step << ",\"lr\":" << lr << ",\"global_loss\":" << global_v
                   << ",\"local_loss\":" << local_v << ",\"wall_ms\":" << wall_ms << "}\n";
        }
        ++step;

        const bool epoch_end = cursor >= order.size() || step == cfg.total_steps;
        if (epoch_end) {
            if (log) {
                const double map = splits.gallery.empty() || splits.query.empty()
                                       ? 0.0
                                       : retrieval_map(model, data, splits, cfg.map_k);
                (*log) << "{\"epoch\":" << epoch << ",\"mean_global_loss\":" << epoch_global / epoch_steps
                       << ",\"mean_local_loss\":" << epoch_local / epoch_steps << ",\"map\":" << map
                       << "}\n";
            }
            ++epoch;
            epoch_global = epoch_local = 0.0;
            epoch_steps = 0;
        }
    }
    result.steps_run = step;
    result.train_accuracy = classification_accuracy(model, data, splits.train, cfg.batch_size);
    if (!splits.gallery.empty() && !splits.query.empty()) {
        result.final_map = retrieval_map(model, data, splits, cfg.map_k);
    }
    return result;
}

}  // namespace dalg
