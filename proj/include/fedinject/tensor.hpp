#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fedinject::tensor {

/// Dense row-major tensor of 64-bit floats. Value semantics; moves are cheap.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    /// Rank-2 accessors; DimensionError when the tensor is not a matrix.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    double& at(std::size_t i) { return data_[i]; }
    double at(std::size_t i) const { return data_[i]; }
    double& at2(std::size_t r, std::size_t c) { return data_[r * cols_cache_ + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * cols_cache_ + c]; }

    bool is_scalar() const { return data_.size() == 1 && shape_.size() <= 1; }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    bool bit_equal(const Tensor& o) const;

    void fill(double v);
    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    std::size_t cols_cache_ = 0; // last dim, for at2
};

std::string shape_to_string(std::span<const std::size_t> shape);

/// Trainable (or frozen) model weight with persistent gradient buffer.
struct Parameter {
    Tensor value;
    Tensor grad; // same shape as value, accumulates across backward calls
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor v, bool trainable_ = true)
        : value(std::move(v)), grad(Tensor(value.shape())), trainable(trainable_) {}

    void zero_grad() { grad.fill(0.0); }
};

} // namespace fedinject::tensor
