#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "lacoste/common.hpp"

namespace lacoste {

// Dense row-major double tensor. All learnable state and intermediate
// activations use this type; serialization converts to float32 at the edge.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        v_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }
    Tensor(std::vector<int64_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (static_cast<int64_t>(v_.size()) != count(shape_))
            throw argument_error("Tensor: value count does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double value) {
        Tensor t(std::move(shape));
        for (double& x : t.v_) x = value;
        return t;
    }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    // 2-D / 3-D accessors (row-major).
    double& at2(int64_t r, int64_t c) { return v_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at2(int64_t r, int64_t c) const { return v_[static_cast<size_t>(r * shape_[1] + c)]; }
    double& at3(int64_t a, int64_t b, int64_t c) {
        return v_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }
    double at3(int64_t a, int64_t b, int64_t c) const {
        return v_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }

    Tensor reshaped(std::vector<int64_t> shape) const {
        if (count(shape) != numel()) throw argument_error("reshape: element count mismatch");
        return Tensor(std::move(shape), v_);
    }

    void fill(double value) {
        for (double& x : v_) x = value;
    }
    void add_(const Tensor& o) {
        if (!same_shape(o)) throw argument_error("Tensor::add_: shape mismatch");
        for (size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    }
    void scale_(double k) {
        for (double& x : v_) x *= k;
    }

    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw argument_error("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

  private:
    std::vector<int64_t> shape_;
    std::vector<double> v_;
};

inline Tensor random_uniform(std::vector<int64_t> shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform_real(rng, lo, hi);
    return t;
}

inline Tensor random_normal(std::vector<int64_t> shape, double mean, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal_real(rng, mean, stddev);
    return t;
}

}  // namespace lacoste
