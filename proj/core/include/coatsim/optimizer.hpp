#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>

#include "coatsim/expand.hpp"
#include "coatsim/tensor.hpp"

namespace coatsim {

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float lr = 1e-3f;
    float weight_decay = 0.0f;
    float eps = 1e-8f;
    int64_t step = 0;
};

enum class StateFormat : uint8_t { FP32 = 0, E4M3 = 1, E5M2 = 2, DE8 = 3 };

const char* to_string(StateFormat f);
StateFormat parse_state_format(const std::string& name);

/// Storage policy for one moment: format, whether dynamic range expansion is
/// applied before quantization, and the 1xG group size (128 by default per
/// the optimizer-state recipe).
struct MomentPolicy {
    StateFormat format = StateFormat::FP32;
    bool expand = false;
    int64_t group_size = 128;
};

struct SlotPolicy {
    MomentPolicy first;
    MomentPolicy second;
};

/// A moment is held between steps in whatever representation the policy
/// dictates. Quantized forms keep a zero-padded flat view (padding up to a
/// group multiple; stripped on load).
using MomentState = std::variant<Tensor, QuantizedTensor, ExpandedQuantState>;

struct OptimizerSlot {
    std::vector<int64_t> shape;
    MomentState m;
    MomentState v;
    SlotPolicy policy;
    int64_t step = 0;
};

OptimizerSlot make_slot(const std::vector<int64_t>& shape, const SlotPolicy& policy);

/// dequantize(+contract) -> FP32 AdamW update -> requantize(+expand).
/// k and scales are remeasured from the current tensors on every step.
void step(Tensor& params, const Tensor& grads, OptimizerSlot& slot, const AdamWConfig& cfg);

/// Pure-FP32 AdamW oracle; t is the 1-based step number being applied.
void reference_adamw_step(Tensor& params, Tensor& m, Tensor& v, const Tensor& grads,
                          const AdamWConfig& cfg, int64_t t);

/// Round-trip a tensor through a moment policy's storage representation.
Tensor policy_round_trip(const Tensor& x, const MomentPolicy& policy);

/// MSE between m_q/(sqrt(v_q)+eps) and m/(sqrt(v)+eps) where the q states are
/// the policy round trips of the references.
double update_direction_mse(const Tensor& m_ref, const Tensor& v_ref,
                            const MomentPolicy& first, const MomentPolicy& second, float eps);

void write_slot(std::ostream& os, const OptimizerSlot& slot, const AdamWConfig& cfg);
std::pair<OptimizerSlot, AdamWConfig> read_slot(std::istream& is);
void save_slot(const std::string& path, const OptimizerSlot& slot, const AdamWConfig& cfg);
std::pair<OptimizerSlot, AdamWConfig> load_slot(const std::string& path);

}  // namespace coatsim
