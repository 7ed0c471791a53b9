// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace dalg {

/// Base class for all structured errors thrown by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape/dimension mismatch; message names the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Non-finite value produced where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

/// File format or filesystem failure.
struct IoError : Error {
    using Error::Error;
};

/// Configuration document violates the schema.
struct SchemaError : Error {
    using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);
    static Tensor from(std::initializer_list<double> values);  // rank-1

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t extent(std::int64_t axis) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Multi-index accessor, bounds-checked. Convenience for tests and setup code.
    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Throws NumericError naming `op` if any entry of `t` is NaN or infinite.
void check_finite(const Tensor& t, const char* op);

}  // namespace dalg
