// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "dalg/graph.hpp"

namespace dalg {

/// Compares reverse-mode gradients of a deterministic scalar-valued recorded
/// function against central finite differences over every entry of every
/// parameter. Returns the maximum of
///   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double grad_check(const std::function<Value(Graph&)>& f, const std::vector<Parameter*>& params,
                  double eps = 1e-6);

}  // namespace dalg
