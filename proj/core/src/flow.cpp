#include "coatsim/flow.hpp"

#include <algorithm>
#include <cmath>

#include "coatsim/rng.hpp"

namespace coatsim {

namespace {

constexpr float kRopeBase = 10000.0f;

Tensor bf16_all(const Tensor& t) {
    Tensor out(t.shape);
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = round_bf16(t[i]);
    return out;
}

// a: (m, k) times b: (k, n), FP32 accumulation.
Tensor matmul(const Tensor& a, const Tensor& b, int64_t m, int64_t k, int64_t n) {
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const float av = a[i * k + p];
            if (av == 0.0f) continue;
            for (int64_t j = 0; j < n; ++j) {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    return out;
}

// a: (m, n) times b^T where b: (k, n) -> (m, k).
Tensor matmul_nt(const Tensor& a, const Tensor& b, int64_t m, int64_t n, int64_t k) {
    Tensor out({m, k});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < k; ++j) {
            float acc = 0.0f;
            for (int64_t p = 0; p < n; ++p) acc += a[i * n + p] * b[j * n + p];
            out[i * k + j] = acc;
        }
    }
    return out;
}

Tensor transpose2d(const Tensor& t, int64_t rows, int64_t cols) {
    Tensor out({cols, rows});
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < cols; ++c) out[c * rows + r] = t[r * cols + c];
    }
    return out;
}

Tensor rmsnorm_forward(const Tensor& x, const Tensor& w, int64_t rows, int64_t h, float eps) {
    Tensor out(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        float var = 0.0f;
        for (int64_t j = 0; j < h; ++j) {
            const float v = x[r * h + j];
            var += v * v;
        }
        var /= float(h);
        const float rms = std::sqrt(var + eps);
        for (int64_t j = 0; j < h; ++j) {
            out[r * h + j] = x[r * h + j] / rms * w[j];
        }
    }
    return out;
}

void rmsnorm_backward(const Tensor& dy, const Tensor& x, const Tensor& w, int64_t rows,
                      int64_t h, float eps, Tensor& dx, Tensor& dw) {
    for (int64_t r = 0; r < rows; ++r) {
        float var = 0.0f;
        for (int64_t j = 0; j < h; ++j) {
            const float v = x[r * h + j];
            var += v * v;
        }
        var /= float(h);
        const float rms = std::sqrt(var + eps);
        float s = 0.0f;
        for (int64_t j = 0; j < h; ++j) {
            const float xhat = x[r * h + j] / rms;
            const float dyw = dy[r * h + j] * w[j];
            s += dyw * xhat;
            dw[j] += dy[r * h + j] * xhat;
        }
        s /= float(h);
        for (int64_t j = 0; j < h; ++j) {
            const float xhat = x[r * h + j] / rms;
            const float dyw = dy[r * h + j] * w[j];
            dx[r * h + j] = (dyw - xhat * s) / rms;
        }
    }
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float silu(float x) { return x * sigmoid(x); }
inline float silu_grad(float x) {
    const float s = sigmoid(x);
    return s * (1.0f + x * (1.0f - s));
}

// Rotate-half rotary embedding over (B, S, H) laid out per head;
// direction +1 applies the rotation, -1 its inverse.
Tensor rope_rotate(const Tensor& t, const LayerSpec& spec, float direction) {
    const int64_t dh = spec.head_dim();
    const int64_t half = dh / 2;
    Tensor out(t.shape);
    for (int64_t b = 0; b < spec.batch; ++b) {
        for (int64_t s = 0; s < spec.seq_len; ++s) {
            const int64_t base = (b * spec.seq_len + s) * spec.hidden;
            for (int64_t head = 0; head < spec.num_heads; ++head) {
                const int64_t hb = base + head * dh;
                for (int64_t i = 0; i < half; ++i) {
                    const float inv_freq =
                        1.0f / std::pow(kRopeBase, 2.0f * float(i) / float(dh));
                    const float angle = direction * float(s) * inv_freq;
                    const float c = std::cos(angle);
                    const float sn = std::sin(angle);
                    const float lo = t[hb + i];
                    const float hi = t[hb + half + i];
                    out[hb + i] = lo * c - hi * sn;
                    out[hb + half + i] = hi * c + lo * sn;
                }
            }
        }
    }
    return out;
}

struct AttentionIo {
    const LayerSpec* spec;
    bool round;  // BF16-emulated precision when true

    float maybe_round(float v) const { return round ? round_bf16(v) : v; }

    // softmax(q k^T / sqrt(dh)) v per (batch, head); scores and probabilities
    // round to BF16 under emulation, matching what backward recomputes.
    Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
        const int64_t S = spec->seq_len, H = spec->hidden, dh = spec->head_dim();
        const float inv_sqrt = 1.0f / std::sqrt(float(dh));
        Tensor out({spec->batch, S, H});
        std::vector<float> scores(size_t(S) * size_t(S));
        for (int64_t b = 0; b < spec->batch; ++b) {
            for (int64_t head = 0; head < spec->num_heads; ++head) {
                const int64_t off = head * dh;
                auto at = [&](const Tensor& t, int64_t s, int64_t d) {
                    return t[(b * S + s) * H + off + d];
                };
                for (int64_t i = 0; i < S; ++i) {
                    for (int64_t j = 0; j < S; ++j) {
                        float acc = 0.0f;
                        for (int64_t d = 0; d < dh; ++d) acc += at(q, i, d) * at(k, j, d);
                        scores[size_t(i * S + j)] = maybe_round(acc * inv_sqrt);
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    float mx = scores[size_t(i * S)];
                    for (int64_t j = 1; j < S; ++j) mx = std::max(mx, scores[size_t(i * S + j)]);
                    float sum = 0.0f;
                    for (int64_t j = 0; j < S; ++j) {
                        const float e = std::exp(scores[size_t(i * S + j)] - mx);
                        scores[size_t(i * S + j)] = e;
                        sum += e;
                    }
                    for (int64_t j = 0; j < S; ++j) {
                        scores[size_t(i * S + j)] = maybe_round(scores[size_t(i * S + j)] / sum);
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    for (int64_t d = 0; d < dh; ++d) {
                        float acc = 0.0f;
                        for (int64_t j = 0; j < S; ++j) {
                            acc += scores[size_t(i * S + j)] * at(v, j, d);
                        }
                        out[(b * S + i) * H + off + d] = maybe_round(acc);
                    }
                }
            }
        }
        return out;
    }

    void backward(const Tensor& dout, const Tensor& q, const Tensor& k, const Tensor& v,
                  Tensor& dq, Tensor& dk, Tensor& dv) const {
        const int64_t S = spec->seq_len, H = spec->hidden, dh = spec->head_dim();
        const float inv_sqrt = 1.0f / std::sqrt(float(dh));
        std::vector<float> probs(size_t(S) * size_t(S));
        std::vector<float> dprob(size_t(S) * size_t(S));
        std::vector<float> dscore(size_t(S) * size_t(S));
        for (int64_t b = 0; b < spec->batch; ++b) {
            for (int64_t head = 0; head < spec->num_heads; ++head) {
                const int64_t off = head * dh;
                auto at = [&](const Tensor& t, int64_t s, int64_t d) {
                    return t[(b * S + s) * H + off + d];
                };
                auto ref = [&](Tensor& t, int64_t s, int64_t d) -> float& {
                    return t[(b * S + s) * H + off + d];
                };
                // Recompute the probabilities exactly as forward produced them.
                for (int64_t i = 0; i < S; ++i) {
                    for (int64_t j = 0; j < S; ++j) {
                        float acc = 0.0f;
                        for (int64_t d = 0; d < dh; ++d) acc += at(q, i, d) * at(k, j, d);
                        probs[size_t(i * S + j)] = maybe_round(acc * inv_sqrt);
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    float mx = probs[size_t(i * S)];
                    for (int64_t j = 1; j < S; ++j) mx = std::max(mx, probs[size_t(i * S + j)]);
                    float sum = 0.0f;
                    for (int64_t j = 0; j < S; ++j) {
                        const float e = std::exp(probs[size_t(i * S + j)] - mx);
                        probs[size_t(i * S + j)] = e;
                        sum += e;
                    }
                    for (int64_t j = 0; j < S; ++j) {
                        probs[size_t(i * S + j)] = maybe_round(probs[size_t(i * S + j)] / sum);
                    }
                }
                for (int64_t j = 0; j < S; ++j) {
                    for (int64_t d = 0; d < dh; ++d) {
                        float acc = 0.0f;
                        for (int64_t i = 0; i < S; ++i) {
                            acc += probs[size_t(i * S + j)] * at(dout, i, d);
                        }
                        ref(dv, j, d) = acc;
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    for (int64_t j = 0; j < S; ++j) {
                        float acc = 0.0f;
                        for (int64_t d = 0; d < dh; ++d) acc += at(dout, i, d) * at(v, j, d);
                        dprob[size_t(i * S + j)] = acc;
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    float row = 0.0f;
                    for (int64_t j = 0; j < S; ++j) {
                        row += dprob[size_t(i * S + j)] * probs[size_t(i * S + j)];
                    }
                    for (int64_t j = 0; j < S; ++j) {
                        dscore[size_t(i * S + j)] =
                            probs[size_t(i * S + j)] * (dprob[size_t(i * S + j)] - row);
                    }
                }
                for (int64_t i = 0; i < S; ++i) {
                    for (int64_t d = 0; d < dh; ++d) {
                        float accq = 0.0f;
                        for (int64_t j = 0; j < S; ++j) {
                            accq += dscore[size_t(i * S + j)] * at(k, j, d);
                        }
                        ref(dq, i, d) = accq * inv_sqrt;
                    }
                }
                for (int64_t j = 0; j < S; ++j) {
                    for (int64_t d = 0; d < dh; ++d) {
                        float acck = 0.0f;
                        for (int64_t i = 0; i < S; ++i) {
                            acck += dscore[size_t(i * S + j)] * at(q, i, d);
                        }
                        ref(dk, j, d) = acck * inv_sqrt;
                    }
                }
            }
        }
    }
};

}  // namespace

const char* to_string(FlowPolicy p) {
    switch (p) {
        case FlowPolicy::FP32: return "fp32";
        case FlowPolicy::BF16: return "bf16";
        case FlowPolicy::TE: return "te";
        case FlowPolicy::COAT: return "coat";
    }
    return "?";
}

FlowPolicy parse_flow_policy(const std::string& name) {
    if (name == "fp32") return FlowPolicy::FP32;
    if (name == "bf16") return FlowPolicy::BF16;
    if (name == "te") return FlowPolicy::TE;
    if (name == "coat") return FlowPolicy::COAT;
    throw InvalidSpec("unknown flow policy: " + name);
}

void LayerSpec::validate() const {
    if (hidden <= 0 || intermediate <= 0 || num_heads <= 0 || batch <= 0) {
        throw InvalidSpec("layer spec dimensions must be positive");
    }
    if (seq_len <= 0) throw InvalidSpec("layer spec: zero-length sequence");
    if (hidden % num_heads != 0) throw InvalidSpec("layer spec: heads must divide hidden");
    if ((hidden / num_heads) % 2 != 0) throw InvalidSpec("layer spec: head_dim must be even");
    if (policy == FlowPolicy::COAT) {
        if (group_size <= 0 || hidden % group_size != 0 || intermediate % group_size != 0) {
            throw InvalidSpec("layer spec: group size must divide hidden and intermediate");
        }
    }
}

LayerWeights LayerWeights::random(const LayerSpec& spec, uint64_t seed) {
    const int64_t h = spec.hidden, inter = spec.intermediate;
    auto fill = [](Tensor& t, SplitMix64& rng, double scale) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(scale * rng.next_normal());
    };
    LayerWeights w;
    SplitMix64 rng = SplitMix64::split(seed, 17);
    w.rms1 = Tensor({h});
    w.rms2 = Tensor({h});
    for (int64_t i = 0; i < h; ++i) w.rms1[i] = float(1.0 + 0.1 * rng.next_normal());
    for (int64_t i = 0; i < h; ++i) w.rms2[i] = float(1.0 + 0.1 * rng.next_normal());
    w.wq = Tensor({h, h});
    w.wk = Tensor({h, h});
    w.wv = Tensor({h, h});
    w.wo = Tensor({h, h});
    w.wgate = Tensor({h, inter});
    w.wup = Tensor({h, inter});
    w.wdown = Tensor({inter, h});
    const double s_h = 1.0 / std::sqrt(double(h));
    const double s_i = 1.0 / std::sqrt(double(inter));
    fill(w.wq, rng, s_h);
    fill(w.wk, rng, s_h);
    fill(w.wv, rng, s_h);
    fill(w.wo, rng, s_h);
    fill(w.wgate, rng, s_h);
    fill(w.wup, rng, s_h);
    fill(w.wdown, rng, s_i);
    return w;
}

int64_t SavedActivation::bytes() const {
    int64_t n = 0;
    switch (kind) {
        case SaveKind::Fp8PerGroup:
        case SaveKind::Fp8PerTensor:
            n = int64_t(q.codes.size()) + int64_t(q.scales.size()) * 2;
            break;
        case SaveKind::Bf16:
            n = dense.numel() * 2;
            break;
        case SaveKind::Fp32:
            n = dense.numel() * 4;
            break;
    }
    if (has_cached_scale) n += 2;
    return n;
}

Tensor SavedActivation::used_values() const {
    if (kind == SaveKind::Fp8PerGroup || kind == SaveKind::Fp8PerTensor) return dequantize(q);
    return dense;
}

Tensor SavedActivation::used_values_transposed() const {
    if (shape.empty()) throw TapeMismatch("transposed save: record has no shape");
    // Leading dims flatten into rows; the channel axis stays contiguous.
    const int64_t cols = shape.back();
    const int64_t rows = shape_numel(shape) / cols;
    if (kind == SaveKind::Bf16 || kind == SaveKind::Fp32) {
        return transpose2d(dense, rows, cols);
    }
    if (transposed_codes.empty()) {
        transposed_codes.resize(q.codes.size());
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) {
                transposed_codes[size_t(c * rows + r)] = q.codes[size_t(r * cols + c)];
            }
        }
    }
    const Fp8Format& fmt = Fp8Format::from_tag(q.format);
    Tensor out({cols, rows});
    if (q.geometry.mode == QuantMode::PerTensor) {
        const float s = q.scales[0];
        for (int64_t i = 0; i < out.numel(); ++i) {
            out[i] = decode_byte(transposed_codes[size_t(i)], fmt) * s;
        }
        return out;
    }
    // Per-group scales follow the original row-major grouping.
    const int64_t g = q.geometry.group_size;
    for (int64_t c = 0; c < cols; ++c) {
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t src = r * cols + c;
            out[c * rows + r] =
                decode_byte(transposed_codes[size_t(c * rows + r)], fmt) * q.scales[size_t(src / g)];
        }
    }
    return out;
}

const SavedActivation& LayerTape::find(const std::string& name) const {
    for (const auto& rec : saves) {
        if (rec->name == name) return *rec;
        for (const auto& role : rec->roles) {
            if (role == name) return *rec;
        }
    }
    throw TapeMismatch("tape record not found: " + name);
}

std::shared_ptr<SavedActivation> LayerTape::find_ptr(const std::string& name) const {
    for (const auto& rec : saves) {
        if (rec->name == name) return rec;
        for (const auto& role : rec->roles) {
            if (role == name) return rec;
        }
    }
    throw TapeMismatch("tape record not found: " + name);
}

int64_t LayerTape::bytes() const {
    int64_t total = 0;
    for (const auto& rec : saves) total += rec->bytes();
    return total;
}

namespace {

struct FlowCtx {
    const LayerSpec* spec;
    LayerTape* tape;

    bool quant_linear() const {
        return spec->policy == FlowPolicy::TE || spec->policy == FlowPolicy::COAT;
    }
    bool quant_groups() const { return spec->policy == FlowPolicy::COAT; }
    bool rounds() const { return spec->policy != FlowPolicy::FP32; }

    Tensor boundary(const Tensor& t) const { return rounds() ? bf16_all(t) : t; }

    std::shared_ptr<SavedActivation> push(std::string name, SaveKind kind,
                                          std::vector<int64_t> shape) const {
        auto rec = std::make_shared<SavedActivation>();
        rec->name = std::move(name);
        rec->kind = kind;
        rec->shape = std::move(shape);
        tape->saves.push_back(rec);
        return rec;
    }

    // Non-linear operator input: per-group FP8 under COAT, BF16 under TE,
    // BF16 values under the BF16 baseline. Norm inputs are saved upcast
    // (4 bytes) under BF16; act-func inputs stay 2-byte.
    Tensor save_nonlinear(const std::string& name, const Tensor& raw, bool upcast_save) const {
        if (quant_groups()) {
            auto rec = push(name, SaveKind::Fp8PerGroup, raw.shape);
            rec->q = quantize(raw, QuantGeometry::per_group(spec->group_size),
                              Fp8Format::e4m3());
            return dequantize(rec->q);
        }
        const Tensor used = boundary(raw);
        // The FP32-upcast save applies to norm inputs under the BF16 baseline
        // only; TE saves them in BF16.
        SaveKind kind = SaveKind::Bf16;
        if (spec->policy == FlowPolicy::FP32) kind = SaveKind::Fp32;
        if (spec->policy == FlowPolicy::BF16 && upcast_save) kind = SaveKind::Fp32;
        auto rec = push(name, kind, raw.shape);
        rec->dense = used;
        return used;
    }

    // Linear operator input: per-tensor FP8 under TE/COAT.
    Tensor save_linear(const std::string& name, const Tensor& raw) const {
        if (quant_linear()) {
            auto rec = push(name, SaveKind::Fp8PerTensor, raw.shape);
            rec->q = quantize(raw, QuantGeometry::per_tensor(), Fp8Format::e4m3());
            return dequantize(rec->q);
        }
        const Tensor used = boundary(raw);
        auto rec = push(name, spec->policy == FlowPolicy::FP32 ? SaveKind::Fp32 : SaveKind::Bf16,
                        raw.shape);
        rec->dense = used;
        return used;
    }

    // BF16 attention-side save (RoPE inputs, attention q/k/v).
    void save_bf16(const std::string& name, const Tensor& values) const {
        auto rec = push(name, spec->policy == FlowPolicy::FP32 ? SaveKind::Fp32 : SaveKind::Bf16,
                        values.shape);
        rec->dense = values;
    }
};

Tensor requantize_cached(const SavedActivation& rec) {
    const Fp8Format& fmt = Fp8Format::e4m3();
    Tensor out(rec.dense.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float scaled = rec.dense[i] / rec.cached_scale;
        out[i] = decode_byte(encode_byte(scaled, fmt), fmt) * rec.cached_scale;
    }
    return out;
}

}  // namespace

DecoderLayer::DecoderLayer(LayerSpec spec, LayerWeights weights)
    : spec_(spec), weights_(std::move(weights)) {
    spec_.validate();
}

void DecoderLayer::start_accumulation_cycle() {
    for (CachedOperand* c : {&cq_, &ck_, &cv_, &co_, &cgate_, &cup_, &cdown_}) {
        c->ready = false;
        c->values = Tensor();
    }
}

const Tensor& DecoderLayer::weight_operand(const Tensor& master, CachedOperand& slot) {
    if (slot.ready) return slot.values;
    switch (spec_.policy) {
        case FlowPolicy::FP32:
            slot.values = master;
            break;
        case FlowPolicy::BF16:
            slot.values = bf16_all(master);
            break;
        case FlowPolicy::TE:
        case FlowPolicy::COAT:
            slot.values = dequantize(quantize(master, QuantGeometry::per_tensor(),
                                              Fp8Format::e4m3()));
            ++weight_scale_computations_;
            break;
    }
    slot.ready = true;
    return slot.values;
}

ForwardResult DecoderLayer::forward(const Tensor& x) {
    const int64_t H = spec_.hidden, I = spec_.intermediate;
    const int64_t N = spec_.tokens();
    if (x.shape != std::vector<int64_t>{spec_.batch, spec_.seq_len, H}) {
        throw ShapeMismatch("forward: input must be (batch, seq, hidden)");
    }
    if (!all_finite(x)) throw NonFiniteInput("forward: input has non-finite values");

    ForwardResult res;
    FlowCtx ctx{&spec_, &res.tape};

    // Attention half.
    const Tensor x_used = ctx.save_nonlinear("rmsnorm1.in", x, /*upcast_save=*/true);
    const Tensor n1 = rmsnorm_forward(x_used, weights_.rms1, N, H, spec_.rms_eps);
    const Tensor n1_used = ctx.save_linear("qkv.in", n1);

    Tensor q_raw = matmul(n1_used, weight_operand(weights_.wq, cq_), N, H, H);
    Tensor k_raw = matmul(n1_used, weight_operand(weights_.wk, ck_), N, H, H);
    Tensor v_raw = matmul(n1_used, weight_operand(weights_.wv, cv_), N, H, H);
    q_raw.shape = {spec_.batch, spec_.seq_len, H};
    k_raw.shape = {spec_.batch, spec_.seq_len, H};
    v_raw.shape = {spec_.batch, spec_.seq_len, H};

    const Tensor qb = ctx.boundary(q_raw);
    const Tensor kb = ctx.boundary(k_raw);
    const Tensor vb = ctx.boundary(v_raw);
    ctx.save_bf16("rope.in.q", qb);
    ctx.save_bf16("rope.in.k", kb);
    Tensor qr = spec_.use_rope ? ctx.boundary(rope_rotate(qb, spec_, 1.0f)) : qb;
    Tensor kr = spec_.use_rope ? ctx.boundary(rope_rotate(kb, spec_, 1.0f)) : kb;
    ctx.save_bf16("attn.q", qr);
    ctx.save_bf16("attn.k", kr);
    ctx.save_bf16("attn.v", vb);

    AttentionIo attn{&spec_, ctx.rounds()};
    const Tensor attn_out = attn.forward(qr, kr, vb);

    // The attention output and the projection input are one shared record;
    // only the scaling factor is kept for the FP8 path.
    auto attn_rec = ctx.push("attn.out", spec_.policy == FlowPolicy::FP32 ? SaveKind::Fp32
                                                                          : SaveKind::Bf16,
                             attn_out.shape);
    attn_rec->roles = {"o_proj.in"};
    attn_rec->dense = attn_out;
    Tensor oproj_in;
    if (ctx.quant_linear()) {
        const QuantizedTensor q =
            quantize(attn_out, QuantGeometry::per_tensor(), Fp8Format::e4m3());
        attn_rec->cached_scale = q.scales[0];
        attn_rec->has_cached_scale = true;
        oproj_in = dequantize(q);
    } else {
        oproj_in = attn_rec->dense;
    }

    Tensor oproj_out = matmul(oproj_in, weight_operand(weights_.wo, co_), N, H, H);

    Tensor r1(x.shape);
    for (int64_t i = 0; i < r1.numel(); ++i) r1[i] = x[i] + oproj_out[i];

    // MLP half.
    const Tensor r1_used = ctx.save_nonlinear("rmsnorm2.in", r1, /*upcast_save=*/true);
    const Tensor n2 = rmsnorm_forward(r1_used, weights_.rms2, N, H, spec_.rms_eps);
    const Tensor n2_used = ctx.save_linear("upgate.in", n2);

    const Tensor gate_raw = matmul(n2_used, weight_operand(weights_.wgate, cgate_), N, H, I);
    const Tensor up_raw = matmul(n2_used, weight_operand(weights_.wup, cup_), N, H, I);

    const Tensor gate_used = ctx.save_nonlinear("silu.in", gate_raw, /*upcast_save=*/false);
    Tensor silu_raw(gate_used.shape);
    for (int64_t i = 0; i < silu_raw.numel(); ++i) silu_raw[i] = silu(gate_used[i]);

    const Tensor silu_used = ctx.save_nonlinear("mul.in.silu", silu_raw, /*upcast_save=*/false);
    const Tensor up_used = ctx.save_nonlinear("mul.in.up", up_raw, /*upcast_save=*/false);

    Tensor prod(silu_used.shape);
    for (int64_t i = 0; i < prod.numel(); ++i) prod[i] = silu_used[i] * up_used[i];

    const Tensor prod_used = ctx.save_linear("down.in", prod);
    const Tensor down_out = matmul(prod_used, weight_operand(weights_.wdown, cdown_), N, I, H);

    res.y = Tensor(x.shape);
    for (int64_t i = 0; i < res.y.numel(); ++i) res.y[i] = r1[i] + down_out[i];
    return res;
}

LayerGrads DecoderLayer::backward(const Tensor& dy, const LayerTape& tape) {
    const int64_t H = spec_.hidden, I = spec_.intermediate;
    const int64_t N = spec_.tokens();
    if (dy.shape != std::vector<int64_t>{spec_.batch, spec_.seq_len, H}) {
        throw ShapeMismatch("backward: dy must be (batch, seq, hidden)");
    }
    const bool rounds = spec_.policy != FlowPolicy::FP32;
    auto emit = [&](Tensor t) { return rounds ? bf16_all(t) : std::move(t); };

    LayerGrads grads;
    grads.dw.rms1 = Tensor({H});
    grads.dw.rms2 = Tensor({H});

    // y = r1 + down(...): the residual add passes dy through unrounded.
    // Down projection.
    const SavedActivation& down_in = tape.find("down.in");
    const Tensor d_prod = emit(matmul_nt(dy, weight_operand(weights_.wdown, cdown_), N, H, I));
    grads.dw.wdown = matmul(down_in.used_values_transposed(), dy, I, N, H);

    // SiLU * up.
    const Tensor silu_vals = tape.find("mul.in.silu").used_values();
    const Tensor up_vals = tape.find("mul.in.up").used_values();
    Tensor d_silu({N, I}), d_up({N, I});
    for (int64_t i = 0; i < d_silu.numel(); ++i) {
        d_silu[i] = d_prod[i] * up_vals[i];
        d_up[i] = d_prod[i] * silu_vals[i];
    }
    d_silu = emit(std::move(d_silu));
    d_up = emit(std::move(d_up));

    const Tensor gate_vals = tape.find("silu.in").used_values();
    Tensor d_gate({N, I});
    for (int64_t i = 0; i < d_gate.numel(); ++i) {
        d_gate[i] = d_silu[i] * silu_grad(gate_vals[i]);
    }
    d_gate = emit(std::move(d_gate));

    // Gate/up projections share their input record.
    const SavedActivation& upgate_in = tape.find("upgate.in");
    Tensor dn2 = matmul_nt(d_gate, weight_operand(weights_.wgate, cgate_), N, I, H);
    {
        const Tensor dn2_up = matmul_nt(d_up, weight_operand(weights_.wup, cup_), N, I, H);
        for (int64_t i = 0; i < dn2.numel(); ++i) dn2[i] += dn2_up[i];
    }
    dn2 = emit(std::move(dn2));
    const Tensor upgate_t = upgate_in.used_values_transposed();
    grads.dw.wgate = matmul(upgate_t, d_gate, H, N, I);
    grads.dw.wup = matmul(upgate_t, d_up, H, N, I);

    // RMSNorm 2.
    const Tensor r1_vals = tape.find("rmsnorm2.in").used_values();
    Tensor d_r1_norm({N, H});
    rmsnorm_backward(dn2, r1_vals, weights_.rms2, N, H, spec_.rms_eps, d_r1_norm,
                     grads.dw.rms2);
    d_r1_norm = emit(std::move(d_r1_norm));

    // d_r1 = dy (residual skip) + norm2 path.
    Tensor d_r1({N, H});
    for (int64_t i = 0; i < d_r1.numel(); ++i) d_r1[i] = dy[i] + d_r1_norm[i];

    // Output projection; its input is the shared attention-output record,
    // requantized against the cached scale under FP8 policies.
    const SavedActivation& attn_rec = tape.find("o_proj.in");
    Tensor oproj_in_vals =
        attn_rec.has_cached_scale ? requantize_cached(attn_rec) : attn_rec.used_values();
    const Tensor d_attn_out = emit(matmul_nt(d_r1, weight_operand(weights_.wo, co_), N, H, H));
    {
        Tensor oproj_t = transpose2d(oproj_in_vals, N, H);
        grads.dw.wo = matmul(oproj_t, d_r1, H, N, H);
    }

    // Attention.
    const Tensor qr = tape.find("attn.q").used_values();
    const Tensor kr = tape.find("attn.k").used_values();
    const Tensor vb = tape.find("attn.v").used_values();
    Tensor d_qr({spec_.batch, spec_.seq_len, H});
    Tensor d_kr({spec_.batch, spec_.seq_len, H});
    Tensor d_v({spec_.batch, spec_.seq_len, H});
    AttentionIo attn{&spec_, rounds};
    attn.backward(d_attn_out, qr, kr, vb, d_qr, d_kr, d_v);
    d_qr = emit(std::move(d_qr));
    d_kr = emit(std::move(d_kr));
    d_v = emit(std::move(d_v));

    // RoPE backward is the inverse rotation.
    Tensor d_q = spec_.use_rope ? emit(rope_rotate(d_qr, spec_, -1.0f)) : d_qr;
    Tensor d_k = spec_.use_rope ? emit(rope_rotate(d_kr, spec_, -1.0f)) : d_kr;

    // QKV projections share their input record.
    const SavedActivation& qkv_in = tape.find("qkv.in");
    Tensor dn1 = matmul_nt(d_q, weight_operand(weights_.wq, cq_), N, H, H);
    {
        const Tensor t1 = matmul_nt(d_k, weight_operand(weights_.wk, ck_), N, H, H);
        const Tensor t2 = matmul_nt(d_v, weight_operand(weights_.wv, cv_), N, H, H);
        for (int64_t i = 0; i < dn1.numel(); ++i) dn1[i] += t1[i] + t2[i];
    }
    dn1 = emit(std::move(dn1));
    const Tensor qkv_t = qkv_in.used_values_transposed();
    grads.dw.wq = matmul(qkv_t, d_q, H, N, H);
    grads.dw.wk = matmul(qkv_t, d_k, H, N, H);
    grads.dw.wv = matmul(qkv_t, d_v, H, N, H);

    // RMSNorm 1.
    const Tensor x_vals = tape.find("rmsnorm1.in").used_values();
    Tensor d_x_norm({N, H});
    rmsnorm_backward(dn1, x_vals, weights_.rms1, N, H, spec_.rms_eps, d_x_norm, grads.dw.rms1);
    d_x_norm = emit(std::move(d_x_norm));

    grads.dx = Tensor({spec_.batch, spec_.seq_len, H});
    for (int64_t i = 0; i < grads.dx.numel(); ++i) grads.dx[i] = d_r1[i] + d_x_norm[i];
    return grads;
}

}  // namespace coatsim
