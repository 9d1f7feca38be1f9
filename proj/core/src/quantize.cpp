#include "coatsim/quantize.hpp"

#include <algorithm>
#include <cmath>

namespace coatsim {

namespace {

float group_scale(float group_absmax, const Fp8Format& format, const QuantOptions& options) {
    float s = group_absmax > 0.0f ? group_absmax / format.delta_max : format.delta_min;
    if (options.scale_dtype == ScaleDtype::Bf16) {
        s = round_bf16(s);
        if (s == 0.0f) s = bf16_min_positive();
    }
    return s;
}

uint8_t encode_scaled(float value, float scale, const Fp8Format& format) {
    float scaled = value / scale;
    if (format.tag == Fp8Tag::DE8) {
        // DE8 is a normalized format; scale rounding can push the ratio a hair
        // past 1, so saturate here (E4M3/E5M2 saturate inside encode_byte).
        scaled = std::clamp(scaled, -1.0f, 1.0f);
    }
    return encode_byte(scaled, format);
}

}  // namespace

GroupIndexer::GroupIndexer(const std::vector<int64_t>& shape, QuantGeometry geometry)
    : geometry_(geometry) {
    const int64_t numel = shape_numel(shape);
    switch (geometry.mode) {
        case QuantMode::PerTensor:
            group_count_ = 1;
            group_numel_ = numel;
            break;
        case QuantMode::PerGroup: {
            const int64_t g = geometry.group_size;
            if (g <= 0) throw GeometryMismatch("per-group: group size must be positive");
            const int64_t last = shape.empty() ? 1 : shape.back();
            if (last % g != 0) {
                throw GeometryMismatch("per-group: last dim not divisible by group size");
            }
            group_count_ = numel / g;
            group_numel_ = g;
            break;
        }
        case QuantMode::PerBlock: {
            const int64_t b = geometry.block_size;
            if (b <= 0) throw GeometryMismatch("per-block: block size must be positive");
            if (shape.size() < 2) throw GeometryMismatch("per-block: needs rank >= 2");
            rows_ = shape[shape.size() - 2];
            cols_ = shape[shape.size() - 1];
            if (rows_ % b != 0 || cols_ % b != 0) {
                throw GeometryMismatch("per-block: trailing dims not divisible by block size");
            }
            slices_ = numel / (rows_ * cols_);
            tiles_r_ = rows_ / b;
            tiles_c_ = cols_ / b;
            group_count_ = slices_ * tiles_r_ * tiles_c_;
            group_numel_ = b * b;
            contiguous_ = false;
            break;
        }
    }
}

void GroupIndexer::collect(int64_t g, std::vector<int64_t>& out) const {
    out.clear();
    if (contiguous_) {
        const int64_t begin = g * group_numel_;
        for (int64_t i = 0; i < group_numel_; ++i) out.push_back(begin + i);
        return;
    }
    const int64_t b = geometry_.block_size;
    const int64_t tiles_per_slice = tiles_r_ * tiles_c_;
    const int64_t slice = g / tiles_per_slice;
    const int64_t tile = g % tiles_per_slice;
    const int64_t tr = tile / tiles_c_;
    const int64_t tc = tile % tiles_c_;
    const int64_t base = slice * rows_ * cols_ + tr * b * cols_ + tc * b;
    for (int64_t r = 0; r < b; ++r) {
        for (int64_t c = 0; c < b; ++c) out.push_back(base + r * cols_ + c);
    }
}

QuantizedTensor quantize(const Tensor& x, QuantGeometry geometry, const Fp8Format& format,
                         QuantOptions options) {
    if (!all_finite(x)) throw NonFiniteInput("quantize: tensor has non-finite values");
    GroupIndexer indexer(x.shape, geometry);

    QuantizedTensor q;
    q.codes.resize(size_t(x.numel()));
    q.scales.resize(size_t(indexer.group_count()));
    q.geometry = geometry;
    q.format = format.tag;
    q.source_shape = x.shape;

    std::vector<int64_t> idx;
    for (int64_t g = 0; g < indexer.group_count(); ++g) {
        indexer.collect(g, idx);
        float am = 0.0f;
        for (int64_t i : idx) am = std::max(am, std::fabs(x[i]));
        const float s = group_scale(am, format, options);
        q.scales[size_t(g)] = s;
        for (int64_t i : idx) q.codes[size_t(i)] = encode_scaled(x[i], s, format);
    }
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    const Fp8Format& format = Fp8Format::from_tag(q.format);
    GroupIndexer indexer(q.source_shape, q.geometry);
    Tensor out(q.source_shape);
    std::vector<int64_t> idx;
    for (int64_t g = 0; g < indexer.group_count(); ++g) {
        indexer.collect(g, idx);
        const float s = q.scales[size_t(g)];
        for (int64_t i : idx) out[i] = decode_byte(q.codes[size_t(i)], format) * s;
    }
    return out;
}

std::pair<Tensor, float> group_scale_max(const Tensor& x, int64_t group_size) {
    if (group_size <= 0) throw GeometryMismatch("group_scale_max: group size must be positive");
    if (x.last_dim() % group_size != 0) {
        throw GeometryMismatch("group_scale_max: last dim not divisible by group size");
    }
    std::vector<int64_t> ishape = x.shape;
    ishape.back() /= group_size;
    Tensor intermediate(ishape);
    const int64_t groups = x.numel() / group_size;
    for (int64_t g = 0; g < groups; ++g) {
        float m = 0.0f;
        for (int64_t i = 0; i < group_size; ++i) {
            m = std::max(m, std::fabs(x[g * group_size + i]));
        }
        intermediate[g] = m;
    }
    float global = 0.0f;
    for (int64_t g = 0; g < groups; ++g) global = std::max(global, intermediate[g]);
    return {std::move(intermediate), global};
}

double quantization_error(const Tensor& x, QuantGeometry geometry, const Fp8Format& format,
                          QuantOptions options) {
    const Tensor back = dequantize(quantize(x, geometry, format, options));
    return mse(back, x);
}

}  // namespace coatsim
