#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace superscopes {

// Dense row-major float32 tensor.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape_)
        : shape(std::move(shape_)), data(static_cast<size_t>(count(shape)), 0.0f) {}
    Tensor(std::vector<int64_t> shape_, std::vector<float> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {}

    static int64_t count(const std::vector<int64_t> &shape) {
        return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    size_t ndim() const { return shape.size(); }

    // Contiguous slice along the leading axis.
    std::span<float> row(int64_t i) {
        const size_t stride = data.size() / static_cast<size_t>(shape.at(0));
        return {data.data() + static_cast<size_t>(i) * stride, stride};
    }
    std::span<const float> row(int64_t i) const {
        const size_t stride = data.size() / static_cast<size_t>(shape.at(0));
        return {data.data() + static_cast<size_t>(i) * stride, stride};
    }

    bool operator==(const Tensor &) const = default;
};

using TensorMap = std::map<std::string, Tensor>;

} // namespace superscopes
