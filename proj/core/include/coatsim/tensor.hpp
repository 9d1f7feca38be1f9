#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coatsim/errors.hpp"

namespace coatsim {

/// Dense row-major array of 32-bit floats. Immutable-by-convention carrier:
/// operations hand back fresh tensors instead of mutating inputs (the
/// optimizer mutates its own copies explicitly).
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s, float fill = 0.0f);
    static Tensor from(std::vector<int64_t> s, std::vector<float> values);

    int64_t numel() const { return int64_t(data.size()); }
    int64_t rank() const { return int64_t(shape.size()); }
    int64_t dim(int64_t i) const { return shape[size_t(i)]; }
    int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
    /// Product of all dimensions but the last.
    int64_t rows() const;

    float& operator[](int64_t i) { return data[size_t(i)]; }
    float operator[](int64_t i) const { return data[size_t(i)]; }

    std::span<const float> view() const { return {data.data(), data.size()}; }
    std::span<float> view() { return {data.data(), data.size()}; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

int64_t shape_numel(const std::vector<int64_t>& shape);
bool all_finite(const Tensor& t);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Largest absolute value (0 for empty). Single pass, the reference for the
/// two-stage group-scaling reduction.
float absmax(std::span<const float> values);

double mse(const Tensor& a, const Tensor& b);
double max_rel_err(const Tensor& a, const Tensor& b);

}  // namespace coatsim
