// SPDX-License-Identifier: Apache-2.0

#include "dalg/grad_check.hpp"

#include <cmath>

namespace dalg {

namespace {

double eval_forward(const std::function<Value(Graph&)>& f) {
    Graph g;
    return f(g).scalar();
}

}  // namespace

double grad_check(const std::function<Value(Graph&)>& f, const std::vector<Parameter*>& params, double eps) {
    if (eps <= 0.0) throw Error("grad_check: eps must be positive");
    for (Parameter* p : params) p->zero_grad();
    {
        Graph g;
        Value loss = f(g);
        g.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (std::int64_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + eps;
            const double fp = eval_forward(f);
            p.value[i] = orig - eps;
            const double fm = eval_forward(f);
            p.value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace dalg
