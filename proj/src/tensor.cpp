// SPDX-License-Identifier: Apache-2.0

#include "dalg/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dalg {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor(Shape{static_cast<std::int64_t>(values.size())}, std::vector<double>(values));
}

std::int64_t Tensor::extent(std::int64_t axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
}

namespace {

std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> idx) {
    if (idx.size() != shape.size()) {
        throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                         shape_str(shape));
    }
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        if (i < 0 || i >= shape[k]) {
            throw ShapeError("index out of bounds for shape " + shape_str(shape));
        }
        flat = flat * shape[k] + i;
        ++k;
    }
    return flat;
}

}  // namespace

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(flat_index(shape_, idx))];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(flat_index(shape_, idx))];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

}  // namespace dalg
