#pragma once

#include <cstdint>
#include <vector>

#include "coatsim/tensor.hpp"

namespace coatsim {

enum class SyntheticKind {
    /// Sparse-outlier mixture: (1-f) of the values from a narrow zero-mean
    /// Gaussian, f of them multiplied by outlier_scale. Models first-moment
    /// optimizer states.
    OptimizerLike,
    /// 2-D (tokens x channels) Gaussian where a fraction of whole token rows
    /// is multiplied by outlier_scale. Models activation spikes that align
    /// with the token axis.
    ActivationWithOutliers,
    /// Signed values whose magnitudes are log-uniform over a dynamic range of
    /// outlier_scale (the field doubles as the range for this kind), centered
    /// around magnitude 1.
    UniformLog,
};

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::OptimizerLike;
    std::vector<int64_t> shape;
    double outlier_fraction = 0.01;
    double outlier_scale = 100.0;
    uint64_t seed = 0;
};

Tensor generate(const SyntheticSpec& spec);

}  // namespace coatsim
