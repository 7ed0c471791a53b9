// SPDX-License-Identifier: Apache-2.0

#include "dalg/losses.hpp"

#include <cmath>

namespace dalg {

namespace {

Tensor onehot_rows(const std::vector<std::int64_t>& labels, std::int64_t n_classes) {
    Tensor t(Shape{static_cast<std::int64_t>(labels.size()), n_classes});
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0 || labels[r] >= n_classes) {
            throw Error("label " + std::to_string(labels[r]) + " out of range [0, " +
                        std::to_string(n_classes) + ")");
        }
        t[static_cast<std::int64_t>(r) * n_classes + labels[r]] = 1.0;
    }
    return t;
}

}  // namespace

Value arcface_logits(Value f, const std::vector<std::int64_t>& labels, ArcFaceParams& p) {
    Graph& g = *f.graph();
    const Tensor& tf = f.tensor();
    const std::int64_t n_classes = p.class_weights.value.extent(0);
    const std::int64_t dim = p.class_weights.value.extent(1);
    if (tf.rank() != 2 || tf.extent(1) != dim) {
        throw ShapeError("arcface_logits: descriptors " + shape_str(tf.shape()) +
                         " incompatible with class weights " + shape_str(p.class_weights.value.shape()));
    }
    if (static_cast<std::int64_t>(labels.size()) != tf.extent(0)) {
        throw ShapeError("arcface_logits: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(tf.extent(0)) + " descriptors");
    }
    const std::int64_t B = tf.extent(0);

    Value fn = l2_normalize(f, 1);  // throws on a zero-norm descriptor
    Value wn = l2_normalize(g.param(p.class_weights), 1);
    Value cos = matmul(fn, transpose(wn, {1, 0}));  // B x n_classes

    Tensor onehot = onehot_rows(labels, n_classes);
    if (p.margin == 0.0) return scale(cos, p.scale);

    const double cos_m = std::cos(p.margin);
    const double sin_m = std::sin(p.margin);

    // sin(theta) = sqrt(max(1 - cos^2, tiny)); the tiny floor keeps the
    // gradient finite at theta == 0 and biases the logit by < 1e-11.
    constexpr double kSinFloor = 1e-24;
    Value sin2 = sub(g.constant(Tensor::full({B, n_classes}, 1.0)), mul(cos, cos));
    Value sin_theta = sqrt(affine(relu(affine(sin2, 1.0, -kSinFloor)), 1.0, kSinFloor));

    Value phi = sub(affine(cos, cos_m, 0.0), affine(sin_theta, sin_m, 0.0));   // cos(theta + m)
    Value fallback = affine(cos, 1.0, -p.margin * sin_m);                      // cos(theta) - m sin(m)

    // Branch on theta <= pi - m, i.e. cos(theta) >= -cos(m); the indicator is
    // a constant built from forward values.
    Tensor use_phi(Shape{B, n_classes});
    const Tensor& cos_vals = cos.tensor();
    for (std::int64_t i = 0; i < cos_vals.size(); ++i) use_phi[i] = cos_vals[i] >= -cos_m ? 1.0 : 0.0;
    Value phi_mask = g.constant(std::move(use_phi));
    Value inv_phi_mask = affine(phi_mask, -1.0, 1.0);
    Value target_val = add(mul(phi_mask, phi), mul(inv_phi_mask, fallback));

    Value onehot_v = g.constant(onehot);
    Value inv_onehot = affine(onehot_v, -1.0, 1.0);
    Value logits = add(mul(onehot_v, target_val), mul(inv_onehot, cos));
    return scale(logits, p.scale);
}

Value softmax_cross_entropy(Value logits, const std::vector<std::int64_t>& labels) {
    Graph& g = *logits.graph();
    const Tensor& tl = logits.tensor();
    if (tl.rank() != 2) throw ShapeError("cross_entropy: logits must be B x n, got " + shape_str(tl.shape()));
    const std::int64_t B = tl.extent(0), n = tl.extent(1);
    if (static_cast<std::int64_t>(labels.size()) != B) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(B) + " rows");
    }
    Tensor onehot = onehot_rows(labels, n);

    // Row maxima are constants; the gradient of log-sum-exp is unaffected.
    Tensor row_max(Shape{B});
    for (std::int64_t r = 0; r < B; ++r) {
        double m = tl[r * n];
        for (std::int64_t c = 1; c < n; ++c) m = std::max(m, tl[r * n + c]);
        row_max[r] = m;
    }
    Tensor neg_row_max(Shape{B});
    for (std::int64_t r = 0; r < B; ++r) neg_row_max[r] = -row_max[r];

    Value shifted = rowwise_shift(logits, g.constant(std::move(neg_row_max)));
    Value lse = add(log(sum(exp(shifted), {1})), g.constant(std::move(row_max)));
    Value picked = sum(mul(logits, g.constant(std::move(onehot))), {1});
    return mean(sub(lse, picked), {0});
}

DalgLoss dalg_loss(DalgModel& model, const DalgModel::Outputs& out,
                   const std::vector<std::int64_t>& labels, double local_weight) {
    Graph& g = *out.f.graph();
    DalgLoss loss;
    loss.global_loss = softmax_cross_entropy(arcface_logits(out.f, labels, model.arcface), labels);
    if (out.local) {
        loss.local_loss = softmax_cross_entropy(out.local->aux_logits, labels);
        loss.total = add(loss.global_loss, scale(loss.local_loss, local_weight));
    } else {
        loss.local_loss = g.scalar_const(0.0);
        loss.total = loss.global_loss;
    }
    return loss;
}

}  // namespace dalg
