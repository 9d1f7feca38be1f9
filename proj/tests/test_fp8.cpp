#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>

#include "coatsim/fp8.hpp"
#include "coatsim/rng.hpp"

using namespace coatsim;

namespace {

// Test-only reference decode built straight from the field definitions
// (independent of the library's ldexp-based path).
double ref_decode(uint8_t byte, int mbits, int ebits, int bias, bool e4m3) {
    const int sign = byte >> 7;
    const int expf = (byte >> mbits) & ((1 << ebits) - 1);
    const int mant = byte & ((1 << mbits) - 1);
    const int emax = (1 << ebits) - 1;
    if (e4m3) {
        if (expf == emax && mant == (1 << mbits) - 1) return std::nan("");
    } else {
        if (expf == emax) {
            if (mant == 0) return sign ? -INFINITY : INFINITY;
            return std::nan("");
        }
    }
    double mag;
    if (expf == 0) {
        mag = double(mant) * std::pow(2.0, 1 - bias - mbits);
    } else {
        mag = (1.0 + double(mant) / double(1 << mbits)) * std::pow(2.0, expf - bias);
    }
    return sign ? -mag : mag;
}

// Brute-force nearest-code oracle: decode every byte, pick the closest finite
// value, break exact ties toward the even mantissa.
uint8_t oracle_encode(float v, const Fp8Format& fmt) {
    double best = 0.0;
    uint8_t best_byte = 0;
    bool first = true;
    for (int b = 0; b < 256; ++b) {
        if (!code_is_finite(uint8_t(b), fmt)) continue;
        const double val = decode_byte(uint8_t(b), fmt);
        const double dist = std::fabs(val - double(v));
        if (first || dist < std::fabs(best - double(v))) {
            best = val;
            best_byte = uint8_t(b);
            first = false;
        } else if (dist == std::fabs(best - double(v))) {
            const int mask = (1 << fmt.mantissa_bits) - 1;
            const bool cand_even = ((b & mask) & 1) == 0;
            const bool best_even = ((best_byte & mask) & 1) == 0;
            if (val == best) {
                // The +0/-0 pair: pick the sign of the input.
                if (std::signbit(v) == bool(b >> 7)) best_byte = uint8_t(b);
            } else if (cand_even && !best_even) {
                best = val;
                best_byte = uint8_t(b);
            }
        }
    }
    return best_byte;
}

}  // namespace

TEST_CASE("fp8 format constants") {
    const auto& e4 = Fp8Format::e4m3();
    CHECK(e4.delta_max == 448.0f);
    CHECK(e4.delta_min == std::ldexp(1.0f, -9));
    CHECK(e4.exponent_bits == 4);
    CHECK(e4.mantissa_bits == 3);
    CHECK(e4.dynamic_range() == 229376.0);

    const auto& e5 = Fp8Format::e5m2();
    CHECK(e5.delta_max == 57344.0f);
    CHECK(e5.delta_min == std::ldexp(1.0f, -16));
    CHECK(e5.exponent_bits == 5);
    CHECK(e5.mantissa_bits == 2);
}

TEST_CASE("decode matches the field-definition reference for every byte") {
    for (int b = 0; b < 256; ++b) {
        const double r4 = ref_decode(uint8_t(b), 3, 4, 7, true);
        const float d4 = decode_byte(uint8_t(b), Fp8Format::e4m3());
        if (std::isnan(r4)) {
            CHECK(std::isnan(d4));
        } else {
            CHECK(d4 == float(r4));
        }
        const double r5 = ref_decode(uint8_t(b), 2, 5, 15, false);
        const float d5 = decode_byte(uint8_t(b), Fp8Format::e5m2());
        if (std::isnan(r5)) {
            CHECK(std::isnan(d5));
        } else {
            CHECK(d5 == float(r5));
        }
    }
}

TEST_CASE("decode examples") {
    CHECK(decode_byte(0x00, Fp8Format::e4m3()) == 0.0f);
    CHECK(std::signbit(decode_byte(0x80, Fp8Format::e4m3())));
    CHECK(decode_byte(0x38, Fp8Format::e4m3()) == 1.0f);  // exp field = bias
    CHECK(decode_byte(0x01, Fp8Format::e4m3()) == std::ldexp(1.0f, -9));
    CHECK(decode_byte(0x3C, Fp8Format::e5m2()) == 1.0f);
    CHECK(decode_byte(0x01, Fp8Format::e5m2()) == std::ldexp(1.0f, -16));
    CHECK(decode_byte(0x7E, Fp8Format::e4m3()) == 448.0f);
    CHECK(decode_byte(0x7B, Fp8Format::e5m2()) == 57344.0f);
    CHECK(std::isnan(decode_byte(0x7F, Fp8Format::e4m3())));
    CHECK(std::isinf(decode_byte(0x7C, Fp8Format::e5m2())));
}

TEST_CASE("exhaustive round trip over finite codes") {
    for (const Fp8Format* fmt : {&Fp8Format::e4m3(), &Fp8Format::e5m2()}) {
        int finite = 0;
        for (int b = 0; b < 256; ++b) {
            if (!code_is_finite(uint8_t(b), *fmt)) continue;
            ++finite;
            const float v = decode_byte(uint8_t(b), *fmt);
            CHECK(encode_byte(v, *fmt) == uint8_t(b));
        }
        CHECK(finite >= 252);
    }
}

TEST_CASE("encode equals the enumeration oracle") {
    for (const Fp8Format* fmt : {&Fp8Format::e4m3(), &Fp8Format::e5m2()}) {
        SplitMix64 rng(2024);
        for (int i = 0; i < 20000; ++i) {
            const double mag = std::exp(rng.next_uniform(std::log(1e-8), std::log(2e5)));
            const float v = float(rng.next_u64() & 1 ? -mag : mag);
            CHECK(encode_byte(v, *fmt) == oracle_encode(v, *fmt));
        }
        // Exact midpoints between adjacent codes exercise the tie rule.
        for (int b = 0; b + 1 < 256; ++b) {
            if (!code_is_finite(uint8_t(b), *fmt) || !code_is_finite(uint8_t(b + 1), *fmt)) {
                continue;
            }
            const double lo = decode_byte(uint8_t(b), *fmt);
            const double hi = decode_byte(uint8_t(b + 1), *fmt);
            if (!(lo < hi)) continue;
            const float mid = float((lo + hi) / 2.0);
            if (double(mid) != (lo + hi) / 2.0) continue;  // only exact ties
            CHECK(encode_byte(mid, *fmt) == oracle_encode(mid, *fmt));
        }
    }
}

TEST_CASE("encode saturation and zero handling") {
    const auto& e4 = Fp8Format::e4m3();
    CHECK(decode_byte(encode_byte(448.0f, e4), e4) == 448.0f);
    CHECK(decode_byte(encode_byte(10000.0f, e4), e4) == 448.0f);
    CHECK(decode_byte(encode_byte(-10000.0f, e4), e4) == -448.0f);
    CHECK(encode_byte(0.0f, e4) == 0x00);
    CHECK(encode_byte(-0.0f, e4) == 0x80);

    const auto& e5 = Fp8Format::e5m2();
    CHECK(decode_byte(encode_byte(57344.0f, e5), e5) == 57344.0f);
    CHECK(decode_byte(encode_byte(1e20f, e5), e5) == 57344.0f);

    // Below half the smallest subnormal: signed zero. At exactly half: tie
    // to the even (zero) code.
    CHECK(encode_byte(std::ldexp(1.0f, -11), e4) == 0x00);
    CHECK(encode_byte(std::ldexp(1.0f, -10), e4) == 0x00);
    CHECK(encode_byte(-std::ldexp(1.0f, -11), e4) == 0x80);
    CHECK(encode_byte(std::ldexp(1.5f, -10), e4) == 0x01);

    CHECK_THROWS_AS(encode_byte(std::numeric_limits<float>::infinity(), e4), NonFiniteInput);
    CHECK_THROWS_AS(encode_byte(std::numeric_limits<float>::quiet_NaN(), e4), NonFiniteInput);
    CHECK_THROWS_AS(encode_byte(-std::numeric_limits<float>::infinity(), e5), NonFiniteInput);
}

TEST_CASE("decode is non-decreasing over the positive ramp") {
    for (const Fp8Format* fmt : {&Fp8Format::e4m3(), &Fp8Format::e5m2()}) {
        float prev = 0.0f;
        for (int b = 0; b < 128; ++b) {
            if (!code_is_finite(uint8_t(b), *fmt)) continue;
            const float v = decode_byte(uint8_t(b), *fmt);
            CHECK(v >= prev);
            prev = v;
        }
    }
}

TEST_CASE("e4m3 relative rounding error in the normal range") {
    const auto& e4 = Fp8Format::e4m3();
    SplitMix64 rng(7);
    for (int i = 0; i < 20000; ++i) {
        const double v = std::exp(rng.next_uniform(std::log(0x1p-6), std::log(448.0)));
        const float f = float(v);
        const float back = decode_byte(encode_byte(f, e4), e4);
        CHECK(std::fabs(back - f) / std::fabs(f) <= 0x1p-4);
    }
}

TEST_CASE("count of distinct finite e4m3 values is below 256") {
    std::set<float> values;
    for (int b = 0; b < 256; ++b) {
        if (!code_is_finite(uint8_t(b), Fp8Format::e4m3())) continue;
        values.insert(decode_byte(uint8_t(b), Fp8Format::e4m3()));
    }
    CHECK(values.size() < 256);
    CHECK(values.size() == 253);  // 254 finite codes, +0/-0 collapse
}

TEST_CASE("fp8 code wrapper round trip idempotence") {
    SplitMix64 rng(11);
    for (int i = 0; i < 2000; ++i) {
        const uint8_t b = uint8_t(rng.next_u64() & 0xFF);
        for (Fp8Tag tag : {Fp8Tag::E4M3, Fp8Tag::E5M2, Fp8Tag::DE8}) {
            const auto& fmt = Fp8Format::from_tag(tag);
            if (!code_is_finite(b, fmt) || code_is_nan(b, fmt)) continue;
            const float once = decode(Fp8Code{b, tag});
            const float twice = decode(encode(once, fmt));
            CHECK(once == twice);
        }
    }
}

TEST_CASE("de8 decodes the documented layout") {
    // Byte 0x00 is +0, byte 0x80 carries the format maximum.
    CHECK(decode_de8(0x00) == 0.0f);
    CHECK(decode_de8(0x80) == 1.0f);
    // Indicator at the top payload bit: top decade, 6 fraction bits,
    // frac = 63 selects the last midpoint of [0.1, 1].
    CHECK(decode_de8(0x7F) == doctest::Approx(0.1 + 63.5 * 0.9 / 64.0).epsilon(1e-6));
    // Lone code of the lowest decade: 1e-6 * 0.55.
    CHECK(decode_de8(0x01) == doctest::Approx(5.5e-7).epsilon(1e-6));
    CHECK(decode_de8(0x81) == doctest::Approx(-5.5e-7).epsilon(1e-6));
    CHECK(Fp8Format::de8().delta_max == 1.0f);
}

TEST_CASE("de8 exhaustive round trip and value set") {
    std::set<float> values;
    for (int b = 0; b < 256; ++b) {
        const float v = decode_de8(uint8_t(b));
        values.insert(v);
        CHECK(encode_de8(v) == uint8_t(b));
        CHECK(std::fabs(v) <= 1.0f);
    }
    CHECK(values.size() == 256);  // every code decodes to a distinct value
}

TEST_CASE("de8 encode basics") {
    CHECK(encode_de8(0.0f) == 0x00);
    CHECK(decode_de8(encode_de8(1.0f)) == 1.0f);
    CHECK_THROWS_AS(encode_de8(1.5f), OutOfRange);
    CHECK_THROWS_AS(encode_de8(-1.01f), OutOfRange);
    CHECK_THROWS_AS(encode_de8(std::numeric_limits<float>::quiet_NaN()), NonFiniteInput);
    // Nearest-value behavior against a linear scan.
    SplitMix64 rng(23);
    for (int i = 0; i < 2000; ++i) {
        const float v = float(rng.next_uniform(-1.0, 1.0));
        const uint8_t got = encode_de8(v);
        const float got_val = decode_de8(got);
        for (int b = 0; b < 256; ++b) {
            CHECK(std::fabs(decode_de8(uint8_t(b)) - v) >= std::fabs(got_val - v));
        }
        // Non-negative inputs never decode negative (matters for second
        // moments).
        if (v >= 0.0f) CHECK(got_val >= 0.0f);
    }
}

TEST_CASE("round_bf16 basics and tie rule") {
    CHECK(round_bf16(1.0f) == 1.0f);
    CHECK(round_bf16(0.0f) == 0.0f);
    SplitMix64 rng(31);
    // Values already on the BF16 grid are fixed points; rounding is
    // idempotent off the grid.
    for (int i = 0; i < 5000; ++i) {
        const uint32_t bits = uint32_t(rng.next_u64()) & 0xFFFF0000u;
        const float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) continue;
        CHECK(round_bf16(v) == v);
        const float r = round_bf16(v * 1.000001f);
        CHECK(round_bf16(r) == r);
    }
    // 1 + 2^-9 is below the half step: rounds down to 1.
    CHECK(round_bf16(1.0f + 0x1p-9f) == 1.0f);
    // Exact ties go to the even mantissa.
    CHECK(round_bf16(1.0f + 0x1p-8f) == 1.0f);
    CHECK(round_bf16(1.0f + 3 * 0x1p-8f) == 1.0f + 0x1p-6f);
    // Half-ulp bound for an 8-bit significand.
    for (int i = 0; i < 5000; ++i) {
        const float v = float(rng.next_uniform(-100.0, 100.0));
        CHECK(std::fabs(round_bf16(v) - v) <= std::ldexp(std::fabs(v), -8));
    }
}
