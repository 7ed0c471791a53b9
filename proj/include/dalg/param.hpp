// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dalg/tensor.hpp"

namespace dalg {

/// Trainable weight: value plus accumulated gradient of identical shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool decay = true;  // false for norm gains and biases (excluded from weight decay)

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool weight_decay = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(weight_decay) {}

    void zero_grad() {
        for (std::int64_t i = 0; i < grad.size(); ++i) grad[i] = 0.0;
    }
};

/// Throws if any two parameters share a name.
void check_unique_names(const std::vector<Parameter*>& params);

/// Binary little-endian checkpoint: magic "DALG", version, count, then per
/// parameter (name, rank, extents, f64 values). Round-trips bit-exactly.
void save_checkpoint(const std::vector<Parameter*>& params, const std::string& path);

/// Loads a checkpoint into an existing parameter set; names and shapes must
/// match exactly.
void load_checkpoint(const std::vector<Parameter*>& params, const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace dalg
