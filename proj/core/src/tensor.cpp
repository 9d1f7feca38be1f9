#include "coatsim/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace coatsim {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw InvalidSpec("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> s, float fill)
    : shape(std::move(s)), data(size_t(shape_numel(shape)), fill) {}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(s);
    if (shape_numel(t.shape) != int64_t(values.size())) {
        throw ShapeMismatch("element count does not match shape");
    }
    t.data = std::move(values);
    return t;
}

int64_t Tensor::rows() const {
    if (shape.empty()) return 1;
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return r;
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(),
                       [](float v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw ShapeMismatch(std::string(what) + ": shape mismatch");
}

float absmax(std::span<const float> values) {
    float m = 0.0f;
    for (float v : values) m = std::max(m, std::fabs(v));
    return m;
}

double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    if (a.numel() == 0) return 0.0;
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return acc / double(a.numel());
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_rel_err");
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double denom = std::max(std::fabs(double(b[i])), 1e-30);
        worst = std::max(worst, std::fabs(double(a[i]) - double(b[i])) / denom);
    }
    return worst;
}

}  // namespace coatsim
