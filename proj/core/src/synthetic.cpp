#include "coatsim/synthetic.hpp"

#include <cmath>

#include "coatsim/rng.hpp"

namespace coatsim {

namespace {

void validate(const SyntheticSpec& spec) {
    if (spec.shape.empty()) throw InvalidSpec("synthetic: shape is empty");
    shape_numel(spec.shape);
    if (spec.outlier_fraction < 0.0 || spec.outlier_fraction >= 1.0) {
        throw InvalidSpec("synthetic: outlier_fraction must be in [0, 1)");
    }
    if (spec.outlier_scale <= 0.0) {
        throw InvalidSpec("synthetic: outlier_scale must be positive");
    }
    if (spec.kind == SyntheticKind::ActivationWithOutliers && spec.shape.size() != 2) {
        throw InvalidSpec("synthetic: activation-with-outliers is 2-D");
    }
    if (spec.kind == SyntheticKind::UniformLog && spec.outlier_scale <= 1.0) {
        throw InvalidSpec("synthetic: uniform-log needs a dynamic range > 1");
    }
}

Tensor gen_optimizer_like(const SyntheticSpec& spec) {
    Tensor t(spec.shape);
    SplitMix64 values = SplitMix64::split(spec.seed, 0);
    SplitMix64 marks = SplitMix64::split(spec.seed, 1);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = values.next_normal();
        if (marks.next_double() < spec.outlier_fraction) v *= spec.outlier_scale;
        t[i] = float(v);
    }
    return t;
}

Tensor gen_activation_with_outliers(const SyntheticSpec& spec) {
    Tensor t(spec.shape);
    const int64_t tokens = spec.shape[0];
    const int64_t channels = spec.shape[1];
    SplitMix64 values = SplitMix64::split(spec.seed, 0);
    SplitMix64 marks = SplitMix64::split(spec.seed, 1);
    for (int64_t r = 0; r < tokens; ++r) {
        const bool hot = marks.next_double() < spec.outlier_fraction;
        const double scale = hot ? spec.outlier_scale : 1.0;
        for (int64_t c = 0; c < channels; ++c) {
            t[r * channels + c] = float(scale * values.next_normal());
        }
    }
    return t;
}

Tensor gen_uniform_log(const SyntheticSpec& spec) {
    Tensor t(spec.shape);
    SplitMix64 rng = SplitMix64::split(spec.seed, 0);
    const double half_span = 0.5 * std::log(spec.outlier_scale);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double mag = std::exp(rng.next_uniform(-half_span, half_span));
        const bool neg = rng.next_u64() & 1u;
        t[i] = float(neg ? -mag : mag);
    }
    return t;
}

}  // namespace

Tensor generate(const SyntheticSpec& spec) {
    validate(spec);
    switch (spec.kind) {
        case SyntheticKind::OptimizerLike: return gen_optimizer_like(spec);
        case SyntheticKind::ActivationWithOutliers: return gen_activation_with_outliers(spec);
        case SyntheticKind::UniformLog: return gen_uniform_log(spec);
    }
    throw InvalidSpec("synthetic: unknown kind");
}

}  // namespace coatsim
