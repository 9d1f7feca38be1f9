#pragma once

#include <cstdint>

#include "coatsim/errors.hpp"

namespace coatsim {

enum class Fp8Tag : uint8_t { E4M3 = 0, E5M2 = 1, DE8 = 2 };

const char* to_string(Fp8Tag tag);

/// Descriptor of an 8-bit floating format.
///
/// E4M3 and E5M2 follow the OCP encodings: E4M3 has no infinities (0x7F/0xFF
/// are NaN) and saturates at +-448; E5M2 keeps IEEE-style Inf/NaN codes and
/// tops out at +-57344. DE8 is the dynamic-exponent format of 8-bit
/// optimizers: one sign bit, leading zero bits select a power-of-ten decade,
/// an indicator bit terminates the exponent, and the remaining bits pick the
/// midpoint of one of the equal subdivisions of [0.1, 1]. Byte 0x80 (sign set,
/// empty payload) carries the format maximum 1.0, so the 256 code values are
/// the 254 signed midpoints plus {0, 1}.
struct Fp8Format {
    Fp8Tag tag;
    float delta_max;    // largest finite magnitude
    float delta_min;    // smallest positive magnitude (subnormals included)
    int mantissa_bits;
    int exponent_bits;

    static const Fp8Format& e4m3();
    static const Fp8Format& e5m2();
    static const Fp8Format& de8();
    static const Fp8Format& from_tag(Fp8Tag tag);

    double dynamic_range() const { return double(delta_max) / double(delta_min); }
};

/// One encoded byte together with the format it belongs to.
struct Fp8Code {
    uint8_t byte = 0;
    Fp8Tag format = Fp8Tag::E4M3;
};

// Scalar kernels on raw bytes. encode_byte rejects NaN/Inf, saturates
// magnitudes above delta_max, rounds to nearest with ties to even, and sends
// magnitudes below half the smallest subnormal to signed zero.
uint8_t encode_byte(float value, const Fp8Format& format);
float decode_byte(uint8_t byte, const Fp8Format& format);

bool code_is_nan(uint8_t byte, const Fp8Format& format);
bool code_is_finite(uint8_t byte, const Fp8Format& format);

inline Fp8Code encode(float value, const Fp8Format& format) {
    return Fp8Code{encode_byte(value, format), format.tag};
}
inline float decode(Fp8Code code) {
    return decode_byte(code.byte, Fp8Format::from_tag(code.format));
}

// DE8 kernels. encode_de8 requires |value| <= 1 (callers normalize per group);
// ties between adjacent code values break toward the smaller magnitude.
uint8_t encode_de8(float value);
float decode_de8(uint8_t byte);

/// Round a float to the nearest BF16 value (round-to-nearest-even on the top
/// 16 bits) and return it widened back to 32-bit storage.
float round_bf16(float value);

/// Smallest positive BF16 value (subnormal), used to floor scale factors.
float bf16_min_positive();

}  // namespace coatsim
