#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flowseg/errors.hpp"

namespace flowseg::nn {

using Dims = std::vector<int64_t>;

inline int64_t numel_of(const Dims& dims) {
    return std::accumulate(dims.begin(), dims.end(), int64_t{1}, std::multiplies<>());
}

std::string dims_str(const Dims& dims);

/// Dense row-major array of 32- or 64-bit reals. An empty dims list denotes a scalar.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Dims dims) : dims_(std::move(dims)) {
        check_dims();
        data_.assign(static_cast<size_t>(numel_of(dims_)), T(0));
    }

    Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
        check_dims();
        if (static_cast<int64_t>(data_.size()) != numel_of(dims_)) {
            throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                             " does not match dims " + dims_str(dims_));
        }
    }

    static Tensor full(Dims dims, T value) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor(Dims{}, std::vector<T>{value}); }

    const Dims& dims() const { return dims_; }
    int ndim() const { return static_cast<int>(dims_.size()); }
    int64_t dim(int axis) const { return dims_.at(static_cast<size_t>(axis < 0 ? axis + ndim() : axis)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<const T> values() const { return data_; }
    std::span<T> values() { return data_; }
    const T* data() const { return data_.data(); }
    T* data() { return data_.data(); }

    T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item: tensor has dims " + dims_str(dims_));
        return data_[0];
    }

    Tensor reshaped(Dims dims) const {
        if (numel_of(dims) != numel()) {
            throw ShapeError("reshape: " + dims_str(dims_) + " -> " + dims_str(dims));
        }
        return Tensor(std::move(dims), data_);
    }

    bool all_finite() const;

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dims_ == b.dims_ && a.data_ == b.data_;
    }

   private:
    void check_dims() const {
        for (auto d : dims_) {
            if (d <= 0) throw ShapeError("tensor: non-positive extent in " + dims_str(dims_));
        }
    }

    Dims dims_;
    std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace flowseg::nn
