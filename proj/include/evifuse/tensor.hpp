#ifndef EVIFUSE_TENSOR_HPP
#define EVIFUSE_TENSOR_HPP

// Minimal dense N-d array (up to 5 axes) used as the network substrate.
// Templated on the scalar so gradient checks can run in double while
// training runs in float.

#include <concepts>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "evifuse/error.hpp"

namespace evifuse::nn {

template <std::floating_point T>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        if (shape.empty() || shape.size() > 5) {
            throw shape_error("Tensor: rank must be 1..5");
        }
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d <= 0) throw shape_error("Tensor: non-positive axis");
            n *= d;
        }
        data.assign(static_cast<std::size_t>(n), T{0});
    }

    [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    bool operator==(const Tensor&) const = default;

    [[nodiscard]] std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

template <std::floating_point T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape);
}

}  // namespace evifuse::nn

#endif
