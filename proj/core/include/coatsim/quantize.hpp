#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "coatsim/fp8.hpp"
#include "coatsim/tensor.hpp"

namespace coatsim {

enum class QuantMode : uint8_t { PerTensor = 0, PerGroup = 1, PerBlock = 2 };

/// Per-tensor: one scale. Per-group: 1xG runs along the last axis (last dim
/// must divide by G). Per-block: BxB tiles on the last two axes.
struct QuantGeometry {
    QuantMode mode = QuantMode::PerTensor;
    int64_t group_size = 0;
    int64_t block_size = 0;

    static QuantGeometry per_tensor() { return {QuantMode::PerTensor, 0, 0}; }
    static QuantGeometry per_group(int64_t g) { return {QuantMode::PerGroup, g, 0}; }
    static QuantGeometry per_block(int64_t b) { return {QuantMode::PerBlock, 0, b}; }

    bool operator==(const QuantGeometry&) const = default;
};

enum class ScaleDtype : uint8_t { Bf16 = 0, Fp32 = 1 };

struct QuantOptions {
    /// Scales are stored in BF16; codes are computed against the rounded
    /// scale so dequantize is self-consistent. Fp32 is an experimentation
    /// knob (exact-rational round trips).
    ScaleDtype scale_dtype = ScaleDtype::Bf16;
};

struct QuantizedTensor {
    std::vector<uint8_t> codes;   // row-major, one byte per source element
    std::vector<float> scales;    // one per group, strictly positive
    QuantGeometry geometry;
    Fp8Tag format = Fp8Tag::E4M3;
    std::vector<int64_t> source_shape;

    int64_t numel() const { return int64_t(codes.size()); }
    int64_t group_count() const { return int64_t(scales.size()); }
};

/// Indices of the elements belonging to each group, in scale order. Groups
/// are contiguous runs for per-tensor/per-group and strided tiles for
/// per-block; the helper keeps quantize/dequantize/error on one enumeration.
class GroupIndexer {
  public:
    GroupIndexer(const std::vector<int64_t>& shape, QuantGeometry geometry);

    int64_t group_count() const { return group_count_; }
    int64_t group_size() const { return group_numel_; }
    /// Flat element indices of group g appended to `out` (cleared first).
    void collect(int64_t g, std::vector<int64_t>& out) const;
    bool contiguous() const { return contiguous_; }

  private:
    QuantGeometry geometry_;
    int64_t group_count_ = 0;
    int64_t group_numel_ = 0;
    bool contiguous_ = true;
    // Per-block bookkeeping.
    int64_t rows_ = 0, cols_ = 0, slices_ = 0, tiles_r_ = 0, tiles_c_ = 0;
};

QuantizedTensor quantize(const Tensor& x, QuantGeometry geometry, const Fp8Format& format,
                         QuantOptions options = {});
Tensor dequantize(const QuantizedTensor& q);

/// Two-stage Group Scaling max reduction: stage 1 is the per-1xG absmax
/// tensor (G times smaller than x), stage 2 the max of that intermediate.
/// Bitwise equal to a direct single-pass absmax.
std::pair<Tensor, float> group_scale_max(const Tensor& x, int64_t group_size);

/// MSE between x and dequantize(quantize(x)).
double quantization_error(const Tensor& x, QuantGeometry geometry, const Fp8Format& format,
                          QuantOptions options = {});

}  // namespace coatsim
