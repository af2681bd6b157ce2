#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mgt/error.hpp"

namespace mgt {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense n-dimensional array, row-major, contiguous. The scalar type is a
// template parameter: float for training builds, double for gradient checks.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), T(0)) {
        for (int64_t d : shape) check_arg(d > 0, "Tensor: non-positive dimension in " + shape_str(shape));
    }
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        check_arg(static_cast<int64_t>(data.size()) == numel(shape),
                  "Tensor: data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i >= 0 ? i : rank() + i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // 2-D accessor, for tests and small code paths.
    T& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    T at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace mgt
