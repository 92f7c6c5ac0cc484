#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmem/common.hpp"

namespace dmem {

// Dense tensor with value semantics over shared, conceptually immutable
// storage. A tensor participates in reverse-mode differentiation iff it
// carries a grad accumulator (see Tape); frozen weights simply have none,
// so backward passes skip them for free.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data = std::make_shared<std::vector<T>>(numel(), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> values) : shape(std::move(s)) {
        if (static_cast<size_t>(numel()) != values.size())
            throw std::invalid_argument("tensor: shape does not match value count");
        data = std::make_shared<std::vector<T>>(std::move(values));
    }

    size_t numel() const {
        size_t n = 1;
        for (int e : shape) {
            if (e < 1) throw std::invalid_argument("tensor: extent < 1");
            n *= static_cast<size_t>(e);
        }
        return n;
    }

    int ndim() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    bool defined() const { return data != nullptr; }
    bool requires_grad() const { return grad != nullptr; }

    void alloc_grad() {
        if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    }
    void drop_grad() { grad.reset(); }
    void zero_grad() const {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    T& at(size_t i) { return (*data)[i]; }
    const T& at(size_t i) const { return (*data)[i]; }
    T& at2(int i, int j) { return (*data)[static_cast<size_t>(i) * cols() + j]; }
    const T& at2(int i, int j) const { return (*data)[static_cast<size_t>(i) * cols() + j]; }

    T item() const {
        if (data->size() != 1) throw std::logic_error("tensor: item() on non-scalar");
        return (*data)[0];
    }

    bool all_finite() const {
        for (T v : *data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Deep copy of storage (and grad buffer presence, zeroed).
    Tensor<T> clone() const {
        Tensor<T> out;
        out.shape = shape;
        out.data = std::make_shared<std::vector<T>>(*data);
        if (grad) out.alloc_grad();
        return out;
    }
};

template <typename T>
Tensor<T> zeros(std::vector<int> shape) {
    return Tensor<T>(std::move(shape));
}

template <typename T>
Tensor<T> full(std::vector<int> shape, T value) {
    Tensor<T> t(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

template <typename T>
Tensor<T> identity(int n) {
    Tensor<T> t({n, n});
    for (int i = 0; i < n; ++i) t.at2(i, i) = T(1);
    return t;
}

template <typename T>
Tensor<T> uniform(SplitMix64& rng, std::vector<int> shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : *t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> normal(SplitMix64& rng, std::vector<int> shape, double mean, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& v : *t.data) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
}

// Trainable parameter: storage plus grad accumulator.
template <typename T>
Tensor<T> param(Tensor<T> t) {
    t.alloc_grad();
    return t;
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
uint64_t checksum(const Tensor<T>& t, uint64_t h = 0xCBF29CE484222325ULL) {
    return fnv1a(t.data->data(), t.data->size() * sizeof(T), h);
}

} // namespace dmem
