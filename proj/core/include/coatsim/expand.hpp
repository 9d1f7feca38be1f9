#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coatsim/quantize.hpp"
#include "coatsim/tensor.hpp"

namespace coatsim {

/// Full E4M3 dynamic range: 448 / 2^-9. Expansion targets this even when the
/// storage format is E5M2 or DE8 (configurable below).
inline constexpr double kRangeE4M3 = 229376.0;
inline constexpr double kDefaultKMax = 20.0;

/// Per-group expansion parameters: exponent k, stabilizer c = sqrt(absmin *
/// absmax) over the group's nonzero magnitudes, and the measured range R.
/// `degenerate` marks groups where no meaningful range exists (all zero, or a
/// single magnitude level); those pass through with k = 1.
struct ExpansionParams {
    float k = 1.0f;
    float c = 1.0f;
    float measured_range = 0.0f;
    bool degenerate = false;
};

struct ExpandOptions {
    double target_range = kRangeE4M3;
    double k_max = kDefaultKMax;
    QuantOptions quant;
};

/// absmax/absmin over the nonzero elements. Throws AllZeroGroup.
double dynamic_range(std::span<const float> group);

struct OptimalK {
    float k = 1.0f;
    bool degenerate = false;
};

/// k = log(target)/log(range), clamped to [1, k_max]. A range <= 1 is a
/// constant-magnitude group: k = 1, flagged degenerate.
OptimalK optimal_k(double range, double target_range = kRangeE4M3,
                   double k_max = kDefaultKMax);

/// Measure one group: range, optimal k, stabilizer c.
ExpansionParams measure_group(std::span<const float> group,
                              double target_range = kRangeE4M3,
                              double k_max = kDefaultKMax);

/// Elementwise sign(x) * |x/c|^k over contiguous groups of `group_size`.
/// params.size() must equal numel/group_size. Zero maps to zero.
Tensor expand(const Tensor& x, std::span<const ExpansionParams> params, int64_t group_size);

/// Inverse: sign(y) * |y|^(1/k) * c.
Tensor contract(const Tensor& y, std::span<const ExpansionParams> params, int64_t group_size);

/// QuantizedTensor plus the per-group expansion parameters used to produce it.
struct ExpandedQuantState {
    QuantizedTensor quantized;
    std::vector<ExpansionParams> params;
};

/// Q(f(x)) with per-group parameters measured from the current tensor (k is
/// never cached across calls). Groups are contiguous 1xG runs.
ExpandedQuantState expand_quantize(const Tensor& x, int64_t group_size, const Fp8Format& format,
                                   const ExpandOptions& options = {});

/// f^-1(DQ(state)).
Tensor dequantize_contract(const ExpandedQuantState& state);

}  // namespace coatsim
