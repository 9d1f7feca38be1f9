#include "coatsim/fp8.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>

namespace coatsim {

namespace {

struct MiniLayout {
    int mbits;
    int ebits;
    int bias;
    uint8_t max_code;  // code of +delta_max
};

constexpr MiniLayout kE4M3{3, 4, 7, 0x7E};
constexpr MiniLayout kE5M2{2, 5, 15, 0x7B};

const MiniLayout& layout(Fp8Tag tag) {
    return tag == Fp8Tag::E4M3 ? kE4M3 : kE5M2;
}

float decode_minifloat(uint8_t byte, const MiniLayout& lay, Fp8Tag tag) {
    const uint8_t sign = byte >> 7;
    const int expf = (byte >> lay.mbits) & ((1 << lay.ebits) - 1);
    const int mant = byte & ((1 << lay.mbits) - 1);

    if (tag == Fp8Tag::E4M3) {
        if (expf == 0xF && mant == 0x7) return std::numeric_limits<float>::quiet_NaN();
    } else {
        if (expf == 0x1F) {
            if (mant == 0) {
                return sign ? -std::numeric_limits<float>::infinity()
                            : std::numeric_limits<float>::infinity();
            }
            return std::numeric_limits<float>::quiet_NaN();
        }
    }

    float mag;
    if (expf == 0) {
        mag = std::ldexp(float(mant), 1 - lay.bias - lay.mbits);
    } else {
        mag = std::ldexp(float((1 << lay.mbits) + mant), expf - lay.bias - lay.mbits);
    }
    return sign ? -mag : mag;
}

uint8_t encode_minifloat(float value, const MiniLayout& lay, float delta_max) {
    const uint32_t bits = std::bit_cast<uint32_t>(value);
    const uint8_t sign = uint8_t((bits >> 31) << 7);
    const uint32_t absbits = bits & 0x7FFFFFFFu;

    if (absbits == 0) return sign;  // signed zero
    if (std::fabs(value) > delta_max) return sign | lay.max_code;

    // FP32 subnormal inputs sit far below half of any FP8 subnormal.
    if ((absbits >> 23) == 0) return sign;

    const int e32 = int(absbits >> 23) - 127;
    const uint32_t sig = (absbits & 0x7FFFFFu) | 0x800000u;  // 1.m in units of 2^(e32-23)

    const int e_min_normal = 1 - lay.bias;
    const int ulp_exp = std::max(e32, e_min_normal) - lay.mbits;
    const int shift = ulp_exp - (e32 - 23);
    if (shift > 31) return sign;  // magnitude < ulp/256, rounds to zero

    uint32_t q = sig >> shift;
    const uint32_t rem = sig & ((1u << shift) - 1u);
    const uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (q & 1u))) ++q;
    if (q == 0) return sign;

    // The code ramp is contiguous across the subnormal/normal boundary and
    // across exponents, so integer arithmetic on q lands on the right code.
    uint32_t code;
    if (e32 < e_min_normal) {
        code = q;
    } else {
        code = uint32_t((e32 + lay.bias) << lay.mbits) + (q - (1u << lay.mbits));
    }
    code = std::min<uint32_t>(code, lay.max_code);
    return sign | uint8_t(code);
}

// DE8 decode table sorted by value, for nearest-value encode.
struct De8Entry {
    float value;
    uint8_t byte;
};

const std::array<De8Entry, 256>& de8_table() {
    static const std::array<De8Entry, 256> table = [] {
        std::array<De8Entry, 256> t{};
        for (int b = 0; b < 256; ++b) {
            t[size_t(b)] = {decode_de8(uint8_t(b)), uint8_t(b)};
        }
        std::sort(t.begin(), t.end(),
                  [](const De8Entry& a, const De8Entry& b) { return a.value < b.value; });
        return t;
    }();
    return table;
}

}  // namespace

const char* to_string(Fp8Tag tag) {
    switch (tag) {
        case Fp8Tag::E4M3: return "e4m3";
        case Fp8Tag::E5M2: return "e5m2";
        case Fp8Tag::DE8: return "de8";
    }
    return "?";
}

const Fp8Format& Fp8Format::e4m3() {
    static const Fp8Format f{Fp8Tag::E4M3, 448.0f, 0x1p-9f, 3, 4};
    return f;
}

const Fp8Format& Fp8Format::e5m2() {
    static const Fp8Format f{Fp8Tag::E5M2, 57344.0f, 0x1p-16f, 2, 5};
    return f;
}

const Fp8Format& Fp8Format::de8() {
    // delta_min is the lone code of the lowest decade: 1e-6 * 0.55.
    static const Fp8Format f{Fp8Tag::DE8, 1.0f, 5.5e-7f, 6, 7};
    return f;
}

const Fp8Format& Fp8Format::from_tag(Fp8Tag tag) {
    switch (tag) {
        case Fp8Tag::E4M3: return e4m3();
        case Fp8Tag::E5M2: return e5m2();
        case Fp8Tag::DE8: return de8();
    }
    return e4m3();
}

float decode_byte(uint8_t byte, const Fp8Format& format) {
    if (format.tag == Fp8Tag::DE8) return decode_de8(byte);
    return decode_minifloat(byte, layout(format.tag), format.tag);
}

uint8_t encode_byte(float value, const Fp8Format& format) {
    if (!std::isfinite(value)) {
        throw NonFiniteInput("encode: value is not finite");
    }
    if (format.tag == Fp8Tag::DE8) return encode_de8(value);
    return encode_minifloat(value, layout(format.tag), format.delta_max);
}

bool code_is_nan(uint8_t byte, const Fp8Format& format) {
    if (format.tag == Fp8Tag::DE8) return false;
    const MiniLayout& lay = layout(format.tag);
    const int expf = (byte >> lay.mbits) & ((1 << lay.ebits) - 1);
    const int mant = byte & ((1 << lay.mbits) - 1);
    if (format.tag == Fp8Tag::E4M3) return expf == 0xF && mant == 0x7;
    return expf == 0x1F && mant != 0;
}

bool code_is_finite(uint8_t byte, const Fp8Format& format) {
    if (format.tag == Fp8Tag::DE8) return true;
    if (format.tag == Fp8Tag::E4M3) return !code_is_nan(byte, format);
    const int expf = (byte >> kE5M2.mbits) & 0x1F;
    return expf != 0x1F;
}

float decode_de8(uint8_t byte) {
    const uint8_t sign = byte >> 7;
    const uint32_t payload = byte & 0x7Fu;
    if (payload == 0) return sign ? 1.0f : 0.0f;

    const int top = std::bit_width(payload) - 1;  // indicator position, 0..6
    const int decade = 6 - top;                   // leading zeros before it
    const uint32_t frac = payload & ((1u << top) - 1u);
    const double step = 0.9 / double(1u << top);
    const double mag = std::pow(10.0, -decade) * (0.1 + (double(frac) + 0.5) * step);
    const float m = float(mag);
    return sign ? -m : m;
}

uint8_t encode_de8(float value) {
    if (!std::isfinite(value)) {
        throw NonFiniteInput("encode_de8: value is not finite");
    }
    if (std::fabs(value) > 1.0f) {
        throw OutOfRange("encode_de8: |value| > 1 (normalize per group first)");
    }
    const auto& table = de8_table();
    auto it = std::lower_bound(table.begin(), table.end(), value,
                               [](const De8Entry& e, float v) { return e.value < v; });
    if (it == table.end()) return table.back().byte;
    if (it == table.begin()) return it->byte;
    const De8Entry& hi = *it;
    const De8Entry& lo = *(it - 1);
    const float dlo = value - lo.value;
    const float dhi = hi.value - value;
    if (dlo < dhi) return lo.byte;
    if (dhi < dlo) return hi.byte;
    return std::fabs(lo.value) <= std::fabs(hi.value) ? lo.byte : hi.byte;
}

float round_bf16(float value) {
    uint32_t bits = std::bit_cast<uint32_t>(value);
    if (std::isnan(value)) return value;
    const uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

float bf16_min_positive() {
    return std::bit_cast<float>(uint32_t(0x00010000u));
}

}  // namespace coatsim
