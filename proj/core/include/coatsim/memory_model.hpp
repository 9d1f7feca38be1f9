#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coatsim/errors.hpp"

namespace coatsim {

/// Exact small rational; the U table contains thirds (2.66U = 8/3 U) that
/// must not drift through float arithmetic.
struct Rational {
    int64_t num = 0;
    int64_t den = 1;

    Rational() = default;
    Rational(int64_t n, int64_t d = 1);

    Rational operator+(const Rational& o) const;
    Rational operator-(const Rational& o) const;
    Rational operator*(const Rational& o) const;
    Rational operator/(const Rational& o) const;
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }

    double to_double() const { return double(num) / double(den); }
    /// Truncate toward zero at two decimals (the display convention of the
    /// published table; 68/40 = 1.7 exactly, but 22.66/13.33 renders 1.69).
    Rational trunc2() const;
    std::string display2() const;
};

enum class MemPolicy : uint8_t { BF16 = 0, TE = 1, COAT = 2 };
const char* to_string(MemPolicy p);
MemPolicy parse_mem_policy(const std::string& name);

/// 1U = batch * seq_len * hidden * 2 bytes. Llama-style layer with
/// intermediate = 8/3 * hidden.
struct MemorySpec {
    int64_t batch = 1;
    int64_t seq_len = 2048;
    int64_t hidden = 4096;
    MemPolicy policy = MemPolicy::COAT;
    bool include_scale_overhead = false;
    int64_t group_size = 16;
};

struct OperatorRow {
    std::string op;
    Rational u;
};

struct MemoryReport {
    MemPolicy policy{};
    std::vector<OperatorRow> rows;
    Rational total_u;
    Rational ratio_exact;        // BF16 total / this policy's total
    std::string total_display;   // 2-dp truncated
    std::string ratio_display;   // 2-dp truncated quotient of truncated totals
    int64_t unit_bytes = 0;      // batch * seq_len * hidden * 2
    Rational total_bytes;        // total_u * unit_bytes, exact
    Rational fp8_payload_bytes;  // bytes held as FP8 codes under this policy
    Rational scale_bytes;        // analytic per-group + per-tensor scale bytes
};

MemoryReport predict(const MemorySpec& spec);

struct ReconcileReport {
    double analytic_bytes = 0.0;  // payload per the U table (no scales)
    int64_t measured_bytes = 0;   // tape accounting (includes scales)
    double overhead_ratio = 0.0;  // (measured - analytic) / fp8 payload
    double bound = 0.0;           // 2 / G
    double achieved_ratio = 0.0;  // BF16 analytic bytes / measured bytes
};

/// Check a measured tape byte count against the analytic model. BF16 must
/// match exactly; FP8 policies may exceed it by at most the per-group scale
/// overhead bound (2/G of the quantized payload). Throws MismatchBeyondBound.
ReconcileReport reconcile(const MemorySpec& spec, int64_t tape_bytes);

}  // namespace coatsim
