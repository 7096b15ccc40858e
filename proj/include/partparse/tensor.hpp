#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "partparse/common.hpp"

namespace partparse {

// Dense row-major tensor of reals. Shape is dynamic; rank is small (<= 4).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), real(0));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, real v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<real> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        PP_CHECK(static_cast<long>(values.size()) == count(t.shape_),
                 "Tensor::from: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    static Tensor scalar(real v) { return from({1}, {v}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    long numel() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }

    real& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    real operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    real& at(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    real at(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

    real& at(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    real at(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    real min() const {
        real m = data_.empty() ? real(0) : data_[0];
        for (real v : data_) m = v < m ? v : m;
        return m;
    }

    real max() const {
        real m = data_.empty() ? real(0) : data_[0];
        for (real v : data_) m = v > m ? v : m;
        return m;
    }

    real sum() const {
        real s = 0;
        for (real v : data_) s += v;
        return s;
    }

    static long count(const std::vector<int>& shape) {
        long n = 1;
        for (int d : shape) {
            PP_CHECK(d >= 0, "Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::vector<real>::iterator begin() { return data_.begin(); }
    std::vector<real>::iterator end() { return data_.end(); }
    std::vector<real>::const_iterator begin() const { return data_.begin(); }
    std::vector<real>::const_iterator end() const { return data_.end(); }

private:
    std::vector<int> shape_;
    std::vector<real> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.same_shape(b); }

}  // namespace partparse
