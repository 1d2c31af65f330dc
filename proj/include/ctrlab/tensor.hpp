#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlab/common.hpp"

namespace ctrlab {

/// Dense row-major tensor of 64-bit reals. Rank 1 and 2 cover everything in
/// this codebase; shape entries must be positive and entries finite.
class Tensor {
public:
    Tensor() : shape_{1}, data_(1, 0.0) {}

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != data_.size()) {
            throw DimError("tensor data length does not match shape");
        }
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw NonFiniteError("non-finite entry in tensor construction");
            }
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor ones(std::vector<int> shape) {
        Tensor t(std::move(shape));
        t.data_.assign(t.data_.size(), 1.0);
        return t;
    }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) {
            x = v;
        }
        t.validate();
        return t;
    }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) {
            t.data_[static_cast<std::size_t>(i) * n + i] = 1.0;
        }
        return t;
    }

    static Tensor randn(std::vector<int> shape, rng::Stream& stream, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) {
            x = stream.normal() * stddev;
        }
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }

    int rows() const {
        require_rank(2);
        return shape_[0];
    }
    int cols() const {
        require_rank(2);
        return shape_[1];
    }
    int dim() const {
        require_rank(1);
        return shape_[0];
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int i, int j) {
        require_rank(2);
        return data_[static_cast<std::size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const {
        require_rank(2);
        return data_[static_cast<std::size_t>(i) * shape_[1] + j];
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }
    bool operator!=(const Tensor& o) const { return !(*this == o); }

    void validate() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw NonFiniteError("non-finite entry in tensor");
            }
        }
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            os << (i ? "x" : "") << shape_[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) {
            throw DimError("tensor shape must be non-empty");
        }
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) {
                throw DimError("tensor shape entries must be positive");
            }
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    void require_rank(int r) const {
        if (rank() != r) {
            throw DimError("tensor rank " + std::to_string(rank()) + ", expected " + std::to_string(r));
        }
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

inline double dot_raw(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm(const Tensor& a) {
    return std::sqrt(dot_raw(a, a));
}

}  // namespace ctrlab
