#include "coatsim/expand.hpp"

#include <cmath>

namespace coatsim {

namespace {

void check_grouping(int64_t numel, int64_t group_size, size_t param_count) {
    if (group_size <= 0 || numel % group_size != 0) {
        throw GeometryMismatch("expand: numel not divisible by group size");
    }
    if (int64_t(param_count) != numel / group_size) {
        throw GeometryMismatch("expand: params count does not match group count");
    }
}

inline float expand_one(float x, double k, double c) {
    if (x == 0.0f) return 0.0f;
    const double mag = std::pow(double(std::fabs(x)) / c, k);
    return float(std::copysign(mag, double(x)));
}

inline float contract_one(float y, double k, double c) {
    if (y == 0.0f) return 0.0f;
    const double mag = std::pow(double(std::fabs(y)), 1.0 / k) * c;
    return float(std::copysign(mag, double(y)));
}

}  // namespace

double dynamic_range(std::span<const float> group) {
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (float v : group) {
        if (v == 0.0f) continue;
        const double a = std::fabs(double(v));
        if (!any) {
            lo = hi = a;
            any = true;
        } else {
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
    }
    if (!any) throw AllZeroGroup("dynamic_range: group has no nonzero element");
    return hi / lo;
}

OptimalK optimal_k(double range, double target_range, double k_max) {
    if (!(range > 1.0)) return {1.0f, true};
    double k = std::log(target_range) / std::log(range);
    k = std::min(std::max(k, 1.0), k_max);
    return {float(k), false};
}

ExpansionParams measure_group(std::span<const float> group, double target_range, double k_max) {
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (float v : group) {
        if (v == 0.0f) continue;
        const double a = std::fabs(double(v));
        if (!any) {
            lo = hi = a;
            any = true;
        } else {
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
    }
    ExpansionParams p;
    if (!any) {
        p.degenerate = true;
        return p;
    }
    const double range = hi / lo;
    p.measured_range = float(range);
    p.c = float(std::sqrt(lo * hi));
    const OptimalK ok = optimal_k(range, target_range, k_max);
    p.k = ok.k;
    p.degenerate = ok.degenerate;
    return p;
}

Tensor expand(const Tensor& x, std::span<const ExpansionParams> params, int64_t group_size) {
    check_grouping(x.numel(), group_size, params.size());
    if (!all_finite(x)) throw NonFiniteInput("expand: tensor has non-finite values");
    Tensor out(x.shape);
    for (size_t g = 0; g < params.size(); ++g) {
        const double k = params[g].k;
        const double c = params[g].c;
        const int64_t begin = int64_t(g) * group_size;
        for (int64_t i = 0; i < group_size; ++i) {
            out[begin + i] = expand_one(x[begin + i], k, c);
        }
    }
    return out;
}

Tensor contract(const Tensor& y, std::span<const ExpansionParams> params, int64_t group_size) {
    check_grouping(y.numel(), group_size, params.size());
    if (!all_finite(y)) throw NonFiniteInput("contract: tensor has non-finite values");
    Tensor out(y.shape);
    for (size_t g = 0; g < params.size(); ++g) {
        const double k = params[g].k;
        const double c = params[g].c;
        const int64_t begin = int64_t(g) * group_size;
        for (int64_t i = 0; i < group_size; ++i) {
            out[begin + i] = contract_one(y[begin + i], k, c);
        }
    }
    return out;
}

ExpandedQuantState expand_quantize(const Tensor& x, int64_t group_size, const Fp8Format& format,
                                   const ExpandOptions& options) {
    // Validates divisibility with the same rule the quantizer applies; valid
    // per-group runs are contiguous in row-major storage.
    GroupIndexer indexer(x.shape, QuantGeometry::per_group(group_size));
    if (!all_finite(x)) throw NonFiniteInput("expand_quantize: tensor has non-finite values");

    const int64_t groups = indexer.group_count();
    std::vector<ExpansionParams> params(static_cast<size_t>(groups));
    for (int64_t g = 0; g < groups; ++g) {
        params[size_t(g)] = measure_group(
            std::span<const float>(x.data.data() + g * group_size, size_t(group_size)),
            options.target_range, options.k_max);
    }
    const Tensor expanded = expand(x, params, group_size);
    ExpandedQuantState state;
    state.quantized = quantize(expanded, QuantGeometry::per_group(group_size), format,
                               options.quant);
    state.params = std::move(params);
    return state;
}

Tensor dequantize_contract(const ExpandedQuantState& state) {
    const Tensor y = dequantize(state.quantized);
    const int64_t g = state.quantized.geometry.group_size;
    return contract(y, state.params, g);
}

}  // namespace coatsim
