// SPDX-License-Identifier: Apache-2.0

#include "dalg/optim.hpp"

#include <cmath>

namespace dalg {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

double LrSchedule::at(std::int64_t step) const {
    if (step < 0) throw Error("lr schedule: negative step");
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (step >= total_steps) return 0.0;
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) / span;
    return base_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p->value.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p->value.size()), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        auto& m = m_[i];
        auto& v = v_[i];
        const double wd = p.decay ? cfg_.weight_decay : 0.0;
        for (std::int64_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            m[static_cast<std::size_t>(j)] = cfg_.beta1 * m[static_cast<std::size_t>(j)] + (1.0 - cfg_.beta1) * g;
            v[static_cast<std::size_t>(j)] = cfg_.beta2 * v[static_cast<std::size_t>(j)] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[static_cast<std::size_t>(j)] / bc1;
            const double vhat = v[static_cast<std::size_t>(j)] / bc2;
            p.value[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p.value[j]);
        }
    }
}

}  // namespace dalg
