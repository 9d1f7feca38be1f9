#include "coatsim/optimizer.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "coatsim/tensor_io.hpp"

namespace coatsim {

namespace {

const Fp8Format& format_of(StateFormat f) {
    switch (f) {
        case StateFormat::E4M3: return Fp8Format::e4m3();
        case StateFormat::E5M2: return Fp8Format::e5m2();
        case StateFormat::DE8: return Fp8Format::de8();
        case StateFormat::FP32: break;
    }
    throw InvalidSpec("FP32 policy has no FP8 format");
}

int64_t padded_len(int64_t n, int64_t g) {
    return ((n + g - 1) / g) * g;
}

Tensor pad_flat(const Tensor& x, int64_t g) {
    Tensor flat({padded_len(x.numel(), g)});
    std::copy(x.data.begin(), x.data.end(), flat.data.begin());
    return flat;
}

Tensor unpad(const Tensor& flat, const std::vector<int64_t>& shape) {
    Tensor out(shape);
    std::copy(flat.data.begin(), flat.data.begin() + out.numel(), out.data.begin());
    return out;
}

MomentState pack_moment(const Tensor& values, const MomentPolicy& policy) {
    if (policy.format == StateFormat::FP32) return values;
    const Tensor flat = pad_flat(values, policy.group_size);
    if (policy.expand) {
        return expand_quantize(flat, policy.group_size, format_of(policy.format));
    }
    return quantize(flat, QuantGeometry::per_group(policy.group_size), format_of(policy.format));
}

Tensor unpack_moment(const MomentState& state, const std::vector<int64_t>& shape) {
    if (const Tensor* t = std::get_if<Tensor>(&state)) return *t;
    if (const QuantizedTensor* q = std::get_if<QuantizedTensor>(&state)) {
        return unpad(dequantize(*q), shape);
    }
    return unpad(dequantize_contract(std::get<ExpandedQuantState>(state)), shape);
}

void adamw_update(float* w, float* m, float* v, const float* g, int64_t n,
                  const AdamWConfig& cfg, int64_t t) {
    const float bc1 = 1.0f - std::pow(cfg.beta1, float(t));
    const float bc2 = 1.0f - std::pow(cfg.beta2, float(t));
    for (int64_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * (g[i] * g[i]);
        const float mhat = m[i] / bc1;
        const float vhat = v[i] / bc2;
        w[i] = w[i] - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
    }
}

}  // namespace

const char* to_string(StateFormat f) {
    switch (f) {
        case StateFormat::FP32: return "fp32";
        case StateFormat::E4M3: return "e4m3";
        case StateFormat::E5M2: return "e5m2";
        case StateFormat::DE8: return "de8";
    }
    return "?";
}

StateFormat parse_state_format(const std::string& name) {
    if (name == "fp32") return StateFormat::FP32;
    if (name == "e4m3") return StateFormat::E4M3;
    if (name == "e5m2") return StateFormat::E5M2;
    if (name == "de8") return StateFormat::DE8;
    throw InvalidSpec("unknown state format: " + name);
}

OptimizerSlot make_slot(const std::vector<int64_t>& shape, const SlotPolicy& policy) {
    OptimizerSlot slot;
    slot.shape = shape;
    slot.policy = policy;
    const Tensor zeros(shape);
    slot.m = pack_moment(zeros, policy.first);
    slot.v = pack_moment(zeros, policy.second);
    slot.step = 0;
    return slot;
}

void step(Tensor& params, const Tensor& grads, OptimizerSlot& slot, const AdamWConfig& cfg) {
    if (params.shape != slot.shape) throw ShapeMismatch("step: params do not match slot shape");
    require_same_shape(params, grads, "step");
    if (!all_finite(grads)) throw NonFiniteGradient("step: gradient has non-finite values");

    Tensor m = unpack_moment(slot.m, slot.shape);
    Tensor v = unpack_moment(slot.v, slot.shape);
    const int64_t t = slot.step + 1;
    adamw_update(params.data.data(), m.data.data(), v.data.data(), grads.data.data(),
                 params.numel(), cfg, t);
    slot.m = pack_moment(m, slot.policy.first);
    slot.v = pack_moment(v, slot.policy.second);
    slot.step = t;
}

void reference_adamw_step(Tensor& params, Tensor& m, Tensor& v, const Tensor& grads,
                          const AdamWConfig& cfg, int64_t t) {
    require_same_shape(params, grads, "reference_adamw_step");
    require_same_shape(params, m, "reference_adamw_step");
    require_same_shape(params, v, "reference_adamw_step");
    const float bc1 = 1.0f - std::pow(cfg.beta1, float(t));
    const float bc2 = 1.0f - std::pow(cfg.beta2, float(t));
    for (int64_t i = 0; i < params.numel(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * (grads[i] * grads[i]);
        const float mhat = m[i] / bc1;
        const float vhat = v[i] / bc2;
        params[i] =
            params[i] - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * params[i]);
    }
}

Tensor policy_round_trip(const Tensor& x, const MomentPolicy& policy) {
    if (policy.format == StateFormat::FP32) return x;
    return unpack_moment(pack_moment(x, policy), x.shape);
}

double update_direction_mse(const Tensor& m_ref, const Tensor& v_ref,
                            const MomentPolicy& first, const MomentPolicy& second, float eps) {
    require_same_shape(m_ref, v_ref, "update_direction_mse");
    const Tensor m_q = policy_round_trip(m_ref, first);
    const Tensor v_q = policy_round_trip(v_ref, second);
    double acc = 0.0;
    for (int64_t i = 0; i < m_ref.numel(); ++i) {
        const double ref = double(m_ref[i]) / (std::sqrt(double(v_ref[i])) + double(eps));
        const double got = double(m_q[i]) / (std::sqrt(double(v_q[i])) + double(eps));
        const double d = got - ref;
        acc += d * d;
    }
    return acc / double(m_ref.numel());
}

namespace {

using nlohmann::json;

json policy_json(const MomentPolicy& p) {
    return json{{"format", to_string(p.format)},
                {"expand", p.expand},
                {"group_size", p.group_size}};
}

MomentPolicy policy_from_json(const json& j) {
    MomentPolicy p;
    p.format = parse_state_format(j.at("format").get<std::string>());
    p.expand = j.at("expand").get<bool>();
    p.group_size = j.at("group_size").get<int64_t>();
    return p;
}

void write_moment(std::ostream& os, const MomentState& state) {
    if (const Tensor* t = std::get_if<Tensor>(&state)) {
        os.put(0);
        write_tensor(os, *t);
    } else if (const QuantizedTensor* q = std::get_if<QuantizedTensor>(&state)) {
        os.put(1);
        write_quantized(os, *q);
    } else {
        os.put(2);
        write_expanded(os, std::get<ExpandedQuantState>(state));
    }
}

MomentState read_moment(std::istream& is) {
    const int kind = is.get();
    switch (kind) {
        case 0: return read_tensor(is);
        case 1: return read_quantized(is);
        case 2: return read_expanded(is);
        default: throw IoError("read_slot: unknown moment record kind");
    }
}

}  // namespace

void write_slot(std::ostream& os, const OptimizerSlot& slot, const AdamWConfig& cfg) {
    json header{{"beta1", cfg.beta1},
                {"beta2", cfg.beta2},
                {"lr", cfg.lr},
                {"weight_decay", cfg.weight_decay},
                {"eps", cfg.eps},
                {"step", slot.step},
                {"shape", slot.shape},
                {"policy", json{{"first", policy_json(slot.policy.first)},
                                {"second", policy_json(slot.policy.second)}}}};
    const std::string text = header.dump();
    const uint32_t len = uint32_t(text.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), std::streamsize(text.size()));
    write_moment(os, slot.m);
    write_moment(os, slot.v);
    if (!os) throw IoError("write_slot: stream failure");
}

std::pair<OptimizerSlot, AdamWConfig> read_slot(std::istream& is) {
    uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!is) throw IoError("read_slot: truncated header");
    std::string text(len, '\0');
    is.read(text.data(), std::streamsize(len));
    if (!is) throw IoError("read_slot: truncated header");
    const json header = json::parse(text);

    AdamWConfig cfg;
    cfg.beta1 = header.at("beta1").get<float>();
    cfg.beta2 = header.at("beta2").get<float>();
    cfg.lr = header.at("lr").get<float>();
    cfg.weight_decay = header.at("weight_decay").get<float>();
    cfg.eps = header.at("eps").get<float>();
    cfg.step = header.at("step").get<int64_t>();

    OptimizerSlot slot;
    slot.shape = header.at("shape").get<std::vector<int64_t>>();
    slot.policy.first = policy_from_json(header.at("policy").at("first"));
    slot.policy.second = policy_from_json(header.at("policy").at("second"));
    slot.step = cfg.step;
    slot.m = read_moment(is);
    slot.v = read_moment(is);
    return {std::move(slot), cfg};
}

void save_slot(const std::string& path, const OptimizerSlot& slot, const AdamWConfig& cfg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_slot(os, slot, cfg);
}

std::pair<OptimizerSlot, AdamWConfig> load_slot(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return read_slot(is);
}

}  // namespace coatsim
