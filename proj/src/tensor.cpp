#include "dirmag/tensor.hpp"

#include "dirmag/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dirmag {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    for (auto extent : shape_) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    }
    data_.assign(shape_product(shape_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto extent : shape_) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    }
    if (shape_product(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    std::vector<float> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range for " + shape_string(shape_));
    return shape_[axis];
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() needs a matrix, got " + shape_string(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() needs a matrix, got " + shape_string(shape_));
    return shape_[1];
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<float>(data_).subspan(r * c, c);
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const float>(data_).subspan(r * c, c);
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " must be a matrix, got " + shape_string(t.shape()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    Tensor out({m, n});
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        auto arow = a.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            auto brow = b.row(p);
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
        }
        auto orow = out.row(i);
        for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    std::vector<double> ex(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        ex[i] = std::exp(static_cast<double>(row[i]) - mx);
        total += ex[i];
    }
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(ex[i] / total);
}

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax input");
    Tensor out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

double l2_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot of unequal lengths");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<double> layer_norm(std::span<const double> v, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
    const std::size_t d = v.size();
    if (d < 2) throw DimensionError("layer_norm needs at least 2 elements");
    if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm gain/bias size mismatch");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) {
        // Zero variance with eps == 0 maps the centred (all-zero) input to zero.
        const double centred = v[i] - mean;
        out[i] = (denom > 0.0 ? centred / denom : 0.0) * gain[i] + bias[i];
    }
    return out;
}

std::vector<double> rms_norm(std::span<const double> v, std::span<const double> gain, double eps) {
    const std::size_t d = v.size();
    if (d < 1) throw DimensionError("rms_norm needs at least 1 element");
    if (gain.size() != d) throw DimensionError("rms_norm gain size mismatch");
    double ms = 0.0;
    for (double x : v) ms += x * x;
    ms /= static_cast<double>(d);
    const double denom = std::sqrt(ms + eps);
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = (denom > 0.0 ? v[i] / denom : 0.0) * gain[i];
    return out;
}

namespace {

std::vector<double> widen(std::span<const float> v) { return std::vector<double>(v.begin(), v.end()); }

std::vector<float> narrow(const std::vector<double>& v) { return std::vector<float>(v.begin(), v.end()); }

} // namespace

std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gain,
                              std::span<const float> bias, double eps) {
    return narrow(layer_norm(std::span<const double>(widen(v)), widen(gain), widen(bias), eps));
}

std::vector<float> rms_norm(std::span<const float> v, std::span<const float> gain, double eps) {
    return narrow(rms_norm(std::span<const double>(widen(v)), widen(gain), eps));
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("add shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

void add_row_bias(Tensor& x, std::span<const float> bias) {
    if (x.cols() != bias.size()) throw DimensionError("bias length does not match columns");
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

float gelu(float x) {
    const double xd = x;
    return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

} // namespace dirmag
