#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dirmag {

// Dense row-major float32 tensor. Reductions over its elements accumulate in
// double; storage stays single precision.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor vector(std::initializer_list<float> values);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    // Row views of a rank-2 tensor.
    std::size_t rows() const;
    std::size_t cols() const;
    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    float& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool operator==(const Tensor& other) const noexcept = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);
std::size_t shape_product(const std::vector<std::size_t>& shape);
bool all_finite(std::span<const float> values);

// Throws DimensionError unless `t` has rank 2.
void require_matrix(const Tensor& t, const char* what);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
void softmax_inplace(std::span<float> row);

double l2_norm(std::span<const float> v);
double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gain,
                              std::span<const float> bias, double eps);
std::vector<float> rms_norm(std::span<const float> v, std::span<const float> gain, double eps);
// Double-precision kernels; the float overloads round these results once.
std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps);
std::vector<double> rms_norm(std::span<const double> v, std::span<const double> gain, double eps);

// Elementwise helpers over equal-shape tensors.
Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
void add_row_bias(Tensor& x, std::span<const float> bias);

// Exact erf GELU.
float gelu(float x);

} // namespace dirmag
