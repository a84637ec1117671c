#include "advvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "advvae/error.hpp"

namespace advvae {

std::size_t shape_numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += "x";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw DimensionError("ragged matrix literal");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return Tensor(Shape{1, values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) {
        throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
    }
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) {
        throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
    }
    return shape_[1];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) noexcept {
    std::fill(data_.begin(), data_.end(), value);
}

namespace kernels {

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
    }
    out = Tensor::matrix(m, n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            // Interaction inputs are mostly zero.
            if (av == 0.0) {
                continue;
            }
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

void matmul_grad_a(const Tensor& g, const Tensor& b, Tensor& ga) {
    const std::size_t m = g.rows(), n = g.cols(), k = b.rows();
    const double* pg = g.data().data();
    const double* pb = b.data().data();
    double* pa = ga.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = pg + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = pb + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += grow[j] * brow[j];
            }
            pa[i * k + p] += acc;
        }
    }
}

void matmul_grad_b(const Tensor& a, const Tensor& g, Tensor& gb) {
    const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
    const double* pa = a.data().data();
    const double* pg = g.data().data();
    double* pb = gb.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = pg + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) {
                continue;
            }
            double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                brow[j] += av * grow[j];
            }
        }
    }
}

}  // namespace kernels

}  // namespace advvae
