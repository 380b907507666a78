#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "mixtable/common.hpp"

namespace mixtable {

// Dense row-major tensor. The engine only needs vectors [n], matrices [r, c]
// and scalars [1].
template <typename Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw Error(concat("tensor data size ", data.size(), " does not match shape ",
                               shape_to_string(shape)));
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel_of(t.shape), Real(0));
        return t;
    }
    static Tensor full(std::vector<int> s, Real v) {
        Tensor t = zeros(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d < 0) throw Error(concat("negative dim in shape ", shape_to_string(s)));
            n *= static_cast<size_t>(d);
        }
        return s.empty() ? 0 : n;
    }

    size_t numel() const { return data.size(); }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 0 : shape[0]); }

    Real& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    Real at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename R2>
    Tensor<R2> cast() const {
        Tensor<R2> t;
        t.shape = shape;
        t.data.reserve(data.size());
        for (Real v : data) t.data.push_back(static_cast<R2>(v));
        return t;
    }
};

template <typename Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (!a.same_shape(b))
        throw Error(concat(op, ": shape mismatch ", shape_to_string(a.shape), " vs ",
                           shape_to_string(b.shape)));
}

}  // namespace mixtable
