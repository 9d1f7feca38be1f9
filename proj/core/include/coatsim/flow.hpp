#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "coatsim/quantize.hpp"
#include "coatsim/tensor.hpp"

namespace coatsim {

/// Precision discipline for one decoder layer.
///   FP32: no quantization, no rounding — the reference path and the
///         straight-through target for finite-difference checks.
///   BF16: baseline; activations round to BF16 at operator boundaries, norm
///         inputs are saved upcast to FP32.
///   TE:   per-tensor FP8 linear inputs, everything else BF16.
///   COAT: per-tensor FP8 linear inputs, per-group 1xG FP8 non-linear inputs,
///         attention kept BF16.
enum class FlowPolicy : uint8_t { FP32 = 0, BF16 = 1, TE = 2, COAT = 3 };

const char* to_string(FlowPolicy p);
FlowPolicy parse_flow_policy(const std::string& name);

struct LayerSpec {
    int64_t hidden = 64;
    int64_t intermediate = 128;
    int64_t num_heads = 4;
    int64_t seq_len = 32;
    int64_t batch = 2;
    int64_t group_size = 16;  // non-linear 1xG group size
    FlowPolicy policy = FlowPolicy::COAT;
    float rms_eps = 1e-6f;
    bool use_rope = true;

    int64_t head_dim() const { return hidden / num_heads; }
    int64_t tokens() const { return batch * seq_len; }
    void validate() const;
};

struct LayerWeights {
    Tensor rms1;  // (H)
    Tensor wq, wk, wv, wo;  // (H, H)
    Tensor rms2;  // (H)
    Tensor wgate, wup;  // (H, I)
    Tensor wdown;  // (I, H)

    static LayerWeights random(const LayerSpec& spec, uint64_t seed);
};

enum class SaveKind : uint8_t { Fp8PerGroup, Fp8PerTensor, Bf16, Fp32 };

/// One saved-for-backward record. FP8 kinds hold codes+scales; BF16/FP32
/// kinds hold the dense values (BF16 values stored widened, counted at
/// 2 bytes per element). The attention output record additionally carries a
/// cached per-tensor scale so backward can requantize it without an FP8 copy.
struct SavedActivation {
    std::string name;
    SaveKind kind = SaveKind::Fp32;
    std::vector<int64_t> shape;
    QuantizedTensor q;
    Tensor dense;
    float cached_scale = 0.0f;
    bool has_cached_scale = false;
    std::vector<std::string> roles;

    int64_t bytes() const;
    /// Values the forward pass consumed (dequantized for FP8 kinds).
    Tensor used_values() const;
    /// Dequantized transpose of a 2-D FP8 save for the weight-gradient path;
    /// the transposed codes are materialized on first use and cached.
    Tensor used_values_transposed() const;

    mutable std::vector<uint8_t> transposed_codes;
};

struct LayerTape {
    std::vector<std::shared_ptr<SavedActivation>> saves;

    const SavedActivation& find(const std::string& name) const;
    std::shared_ptr<SavedActivation> find_ptr(const std::string& name) const;
    int64_t bytes() const;
};

struct ForwardResult {
    Tensor y;
    LayerTape tape;
};

struct LayerGrads {
    Tensor dx;
    LayerWeights dw;
};

/// One Llama-style decoder block: RMSNorm -> QKV -> (RoPE, plain softmax
/// attention in BF16) -> output projection -> residual -> RMSNorm ->
/// gate/up -> SiLU*mul -> down -> residual. Weights are FP32 masters,
/// quantized per-tensor on first use per accumulation cycle.
class DecoderLayer {
  public:
    DecoderLayer(LayerSpec spec, LayerWeights weights);

    ForwardResult forward(const Tensor& x);
    LayerGrads backward(const Tensor& dy, const LayerTape& tape);

    /// Drop cached weight scaling factors (new gradient-accumulation cycle).
    void start_accumulation_cycle();
    /// Number of weight scale computations performed so far.
    int64_t weight_scale_computations() const { return weight_scale_computations_; }

    const LayerSpec& spec() const { return spec_; }
    const LayerWeights& weights() const { return weights_; }

  private:
    struct CachedOperand {
        bool ready = false;
        Tensor values;  // what matmuls consume under the policy
    };

    const Tensor& weight_operand(const Tensor& master, CachedOperand& slot);

    LayerSpec spec_;
    LayerWeights weights_;
    CachedOperand cq_, ck_, cv_, co_, cgate_, cup_, cdown_;
    int64_t weight_scale_computations_ = 0;
};

}  // namespace coatsim
