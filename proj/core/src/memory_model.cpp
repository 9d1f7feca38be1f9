#include "coatsim/memory_model.hpp"

#include <cstdio>
#include <numeric>

namespace coatsim {

Rational::Rational(int64_t n, int64_t d) : num(n), den(d) {
    if (den == 0) throw InvalidSpec("rational with zero denominator");
    if (den < 0) {
        num = -num;
        den = -den;
    }
    const int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
        num /= g;
        den /= g;
    }
}

Rational Rational::operator+(const Rational& o) const {
    return Rational(num * o.den + o.num * den, den * o.den);
}
Rational Rational::operator-(const Rational& o) const {
    return Rational(num * o.den - o.num * den, den * o.den);
}
Rational Rational::operator*(const Rational& o) const {
    return Rational(num * o.num, den * o.den);
}
Rational Rational::operator/(const Rational& o) const {
    if (o.num == 0) throw InvalidSpec("rational division by zero");
    return Rational(num * o.den, den * o.num);
}

Rational Rational::trunc2() const {
    return Rational((num * 100) / den, 100);
}

std::string Rational::display2() const {
    const Rational t = trunc2();
    const int64_t cents = t.num * (100 / t.den);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%lld.%02lld", static_cast<long long>(cents / 100),
                  static_cast<long long>(cents % 100));
    return buf;
}

const char* to_string(MemPolicy p) {
    switch (p) {
        case MemPolicy::BF16: return "bf16";
        case MemPolicy::TE: return "te";
        case MemPolicy::COAT: return "coat";
    }
    return "?";
}

MemPolicy parse_mem_policy(const std::string& name) {
    if (name == "bf16") return MemPolicy::BF16;
    if (name == "te") return MemPolicy::TE;
    if (name == "coat") return MemPolicy::COAT;
    throw InvalidSpec("unknown memory policy: " + name);
}

namespace {

// Per-operator activation saves in U, Llama-style decoder layer
// (intermediate = 8/3 hidden). Row order matches the published table.
std::vector<OperatorRow> policy_rows(MemPolicy p) {
    switch (p) {
        case MemPolicy::BF16:
            return {{"rmsnorm", Rational(4)},
                    {"act_func", Rational(8)},
                    {"rope", Rational(2)},
                    {"flash_attn", Rational(3)},
                    {"linear", Rational(17, 3)}};
        case MemPolicy::TE:
            return {{"rmsnorm", Rational(2)},
                    {"act_func", Rational(8)},
                    {"rope", Rational(2)},
                    {"flash_attn", Rational(3)},
                    {"linear", Rational(10, 3)}};
        case MemPolicy::COAT:
            return {{"rmsnorm", Rational(1)},
                    {"act_func", Rational(4)},
                    {"rope", Rational(2)},
                    {"flash_attn", Rational(3)},
                    {"linear", Rational(10, 3)}};
    }
    throw InvalidSpec("unknown memory policy");
}

Rational total_of(const std::vector<OperatorRow>& rows) {
    Rational t(0);
    for (const auto& r : rows) t = t + r.u;
    return t;
}

// Bytes stored as 1-byte FP8 codes under each policy, in units of
// batch*seq*hidden bytes (i.e. half a U): per-group saves are the two norm
// inputs (2x BSH) plus the three act-func streams (3 x 8/3 BSH); per-tensor
// saves are the qkv/upgate inputs (BSH each) and the down input (8/3 BSH).
struct Fp8Footprint {
    Rational per_group_elems;   // in BSH units
    Rational per_tensor_elems;  // in BSH units
    int64_t per_tensor_scales;  // count of cached per-tensor scales
};

Fp8Footprint fp8_footprint(MemPolicy p) {
    switch (p) {
        case MemPolicy::BF16: return {Rational(0), Rational(0), 0};
        case MemPolicy::TE: return {Rational(0), Rational(14, 3), 4};
        case MemPolicy::COAT: return {Rational(10), Rational(14, 3), 4};
    }
    throw InvalidSpec("unknown memory policy");
}

}  // namespace

MemoryReport predict(const MemorySpec& spec) {
    if (spec.batch <= 0 || spec.seq_len <= 0 || spec.hidden <= 0 || spec.group_size <= 0) {
        throw InvalidSpec("memory spec dimensions must be positive");
    }
    MemoryReport rep;
    rep.policy = spec.policy;
    rep.rows = policy_rows(spec.policy);
    rep.total_u = total_of(rep.rows);
    const Rational bf16_total = total_of(policy_rows(MemPolicy::BF16));
    rep.ratio_exact = bf16_total / rep.total_u;
    rep.total_display = rep.total_u.display2();
    rep.ratio_display = (bf16_total.trunc2() / rep.total_u.trunc2()).display2();
    rep.unit_bytes = spec.batch * spec.seq_len * spec.hidden * 2;
    rep.total_bytes = rep.total_u * Rational(rep.unit_bytes);

    const Fp8Footprint fp = fp8_footprint(spec.policy);
    const Rational bsh(spec.batch * spec.seq_len * spec.hidden);
    rep.fp8_payload_bytes = (fp.per_group_elems + fp.per_tensor_elems) * bsh;
    rep.scale_bytes = Rational(0);
    if (spec.include_scale_overhead) {
        rep.scale_bytes = fp.per_group_elems * bsh * Rational(2, spec.group_size) +
                          Rational(2 * fp.per_tensor_scales);
    }
    return rep;
}

ReconcileReport reconcile(const MemorySpec& spec, int64_t tape_bytes) {
    const MemoryReport rep = predict(spec);
    MemorySpec bf16_spec = spec;
    bf16_spec.policy = MemPolicy::BF16;
    const MemoryReport bf16 = predict(bf16_spec);

    ReconcileReport out;
    out.analytic_bytes = rep.total_bytes.to_double();
    out.measured_bytes = tape_bytes;
    out.achieved_ratio = bf16.total_bytes.to_double() / double(tape_bytes);

    if (spec.policy == MemPolicy::BF16) {
        out.bound = 0.0;
        out.overhead_ratio = 0.0;
        if (rep.total_bytes.den != 1 || rep.total_bytes.num != tape_bytes) {
            throw MismatchBeyondBound("reconcile: BF16 tape must match the model exactly");
        }
        return out;
    }

    out.bound = 2.0 / double(spec.group_size);
    const double payload = rep.fp8_payload_bytes.to_double();
    out.overhead_ratio = (double(tape_bytes) - out.analytic_bytes) / payload;
    if (out.overhead_ratio < 0.0 || out.overhead_ratio > out.bound) {
        throw MismatchBeyondBound("reconcile: tape deviates beyond the scale-overhead bound");
    }
    return out;
}

}  // namespace coatsim
