#include <doctest.h>

#include <cmath>
#include <sstream>

#include "coatsim/expand.hpp"
#include "coatsim/rng.hpp"
#include "coatsim/synthetic.hpp"
#include "coatsim/tensor_io.hpp"

using namespace coatsim;

namespace {

std::vector<ExpansionParams> unit_params(size_t n, float k = 1.0f, float c = 1.0f) {
    std::vector<ExpansionParams> p(n);
    for (auto& e : p) {
        e.k = k;
        e.c = c;
    }
    return p;
}

Tensor random_group(int64_t n, uint64_t seed, double range) {
    // Magnitudes log-uniform across `range`, random signs.
    SplitMix64 rng(seed);
    Tensor t({n});
    const double half = 0.5 * std::log(range);
    for (int64_t i = 0; i < n; ++i) {
        const double mag = std::exp(rng.next_uniform(-half, half));
        t[i] = float(rng.next_u64() & 1 ? -mag : mag);
    }
    return t;
}

}  // namespace

TEST_CASE("dynamic range basics") {
    const float g1[] = {1.0f, 2.0f, 4.0f};
    CHECK(dynamic_range(g1) == 4.0);
    const float g2[] = {1.0f, 2.0f, 4.0f, 8.0f};
    CHECK(dynamic_range(g2) == 8.0);
    const float mixed[] = {-8.0f, 0.0f, 1.0f};  // zeros excluded, signs dropped
    CHECK(dynamic_range(mixed) == 8.0);
    const float zeros[] = {0.0f, 0.0f};
    CHECK_THROWS_AS(dynamic_range(zeros), AllZeroGroup);

    SplitMix64 rng(3);
    for (int i = 0; i < 200; ++i) {
        const Tensor g = random_group(64, 100 + i, 1e5);
        const double r = dynamic_range(g.view());
        Tensor scaled(g.shape);
        const float c = std::ldexp(1.0f, int(rng.next_below(9)) - 4);
        for (int64_t j = 0; j < g.numel(); ++j) scaled[j] = g[j] * c;
        CHECK(dynamic_range(scaled.view()) == doctest::Approx(r).epsilon(1e-12));
    }
}

TEST_CASE("optimal k fixed point and direct evaluation") {
    CHECK(optimal_k(229376.0).k == 1.0f);
    const OptimalK k8 = optimal_k(8.0);
    CHECK(k8.k == doctest::Approx(std::log(229376.0) / std::log(8.0)).epsilon(1e-6));
    CHECK(std::pow(8.0, double(k8.k)) == doctest::Approx(229376.0).epsilon(1e-3));
    // Clamps: above the full range -> 1; near-constant groups -> k_max.
    CHECK(optimal_k(1e9).k == 1.0f);
    CHECK(optimal_k(1.1).k == float(kDefaultKMax));
    // Degenerate range.
    const OptimalK deg = optimal_k(1.0);
    CHECK(deg.k == 1.0f);
    CHECK(deg.degenerate);
}

TEST_CASE("k distributions for first- and second-moment-like groups") {
    // First-moment-like groups (sparse outliers) land in roughly [1, 3];
    // second-moment-like groups (narrow log-uniform) in roughly [5, 15].
    SyntheticSpec mspec;
    mspec.kind = SyntheticKind::OptimizerLike;
    mspec.shape = {256, 128};
    mspec.outlier_fraction = 0.01;
    mspec.outlier_scale = 100.0;
    mspec.seed = 21;
    const Tensor m = generate(mspec);
    int in_range_m = 0, groups = 0;
    for (int64_t g = 0; g < m.numel() / 128; ++g, ++groups) {
        const ExpansionParams p = measure_group(
            std::span<const float>(m.data.data() + g * 128, 128));
        if (p.k >= 1.0f && p.k <= 3.0f) ++in_range_m;
    }
    CHECK(in_range_m >= groups * 8 / 10);

    SplitMix64 rng(22);
    int in_range_v = 0, vgroups = 0;
    for (int i = 0; i < 256; ++i, ++vgroups) {
        const double range = rng.next_uniform(2.5, 11.0);
        Tensor v = random_group(128, 3000 + i, range);
        for (auto& x : v.data) x = std::fabs(x) * 1e-8f;
        const ExpansionParams p = measure_group(v.view());
        if (p.k >= 5.0f && p.k <= 15.0f) ++in_range_v;
    }
    CHECK(in_range_v >= vgroups * 8 / 10);
}

TEST_CASE("expand is the signed power map") {
    const Tensor x = Tensor::from({4}, {-2.0f, -1.0f, 0.0f, 2.0f});
    const auto p = unit_params(1, 3.0f, 1.0f);
    const Tensor y = expand(x, p, 4);
    CHECK(y[0] == -8.0f);
    CHECK(y[1] == -1.0f);
    CHECK(y[2] == 0.0f);
    CHECK(y[3] == 8.0f);
    // k = 1, c = 1 is the identity.
    const Tensor id = expand(x, unit_params(1), 4);
    CHECK(id.data == x.data);
    // contract inverts the cube.
    const Tensor back = contract(y, p, 4);
    CHECK(back[0] == doctest::Approx(-2.0).epsilon(1e-6));
    CHECK(contract(Tensor::from({1}, {-8.0f}), unit_params(1, 3.0f), 1)[0] ==
          doctest::Approx(-2.0).epsilon(1e-6));
}

TEST_CASE("range power law under expansion") {
    SplitMix64 rng(61);
    for (int trial = 0; trial < 300; ++trial) {
        const Tensor g = random_group(64, 7000 + trial, std::exp(rng.next_uniform(1.0, 11.0)));
        const double r = dynamic_range(g.view());
        ExpansionParams p = measure_group(g.view());
        const float k = float(rng.next_uniform(1.0, 20.0));
        p.k = k;
        const Tensor e = expand(g, std::span<const ExpansionParams>(&p, 1), 64);
        const double rexp = dynamic_range(e.view());
        CHECK(rexp == doctest::Approx(std::pow(r, double(k))).epsilon(1e-6));
    }
}

TEST_CASE("expand function assumption suite") {
    SplitMix64 rng(71);
    for (int i = 0; i < 10000; ++i) {
        const double k = rng.next_uniform(1.0, 12.0);
        const auto f = [&](double x) {
            return std::copysign(std::pow(std::fabs(x), k), x);
        };
        const double x = std::exp(rng.next_uniform(std::log(1e-4), std::log(1e4)));
        const double y = std::exp(rng.next_uniform(std::log(1e-4), std::log(1e4)));
        const double r = std::exp(rng.next_uniform(std::log(1e-3), std::log(1e3)));
        // Oddness, fixed points, monotonicity on x > 0.
        CHECK(f(-x) == -f(x));
        CHECK(f(0.0) == 0.0);
        CHECK(f(1.0) == 1.0);
        if (x != y) {
            CHECK(((x < y) == (f(x) < f(y))));
        }
        // Scale invariance of ratios.
        if (x > y) {
            const double lhs = f(x) / f(y);
            const double rhs = f(r * x) / f(r * y);
            CHECK(std::fabs(lhs - rhs) / lhs <= 1e-6);
        }
    }
}

TEST_CASE("stabilizer makes group endpoints reciprocal") {
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor g = random_group(128, 9000 + trial, 1e6);
        const ExpansionParams p = measure_group(g.view());
        double lo = 1e300, hi = 0.0;
        for (float v : g.data) {
            if (v == 0.0f) continue;
            lo = std::min(lo, std::fabs(double(v)));
            hi = std::max(hi, std::fabs(double(v)));
        }
        const double a = lo / double(p.c);
        const double b = hi / double(p.c);
        CHECK(std::fabs(a * b - 1.0) <= 1e-6);
    }
}

TEST_CASE("contract(expand(x)) recovers x") {
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor g = random_group(64, 11000 + trial, 1e6);
        ExpansionParams p = measure_group(g.view());
        const std::span<const ExpansionParams> ps(&p, 1);
        const Tensor back = contract(expand(g, ps, 64), ps, 64);
        CHECK(max_rel_err(back, g) <= 1e-5);
    }
}

TEST_CASE("expansion round trip beats plain quantization on second-moment-like data") {
    SplitMix64 rng(81);
    int wins = 0;
    for (int seed = 0; seed < 20; ++seed) {
        Tensor v({64 * 128});
        for (int g = 0; g < 64; ++g) {
            const double range = rng.next_uniform(2.5, 11.0);
            const Tensor grp = random_group(128, 13000 + seed * 64 + g, range);
            for (int64_t i = 0; i < 128; ++i) {
                v[g * 128 + i] = std::fabs(grp[i]) * 1e-8f;
            }
        }
        const ExpandedQuantState state = expand_quantize(v, 128, Fp8Format::e4m3());
        const double e_exp = mse(dequantize_contract(state), v);
        const double e_plain =
            quantization_error(v, QuantGeometry::per_group(128), Fp8Format::e4m3());
        if (e_exp < e_plain) ++wins;
    }
    CHECK(wins == 20);
}

TEST_CASE("expanded codes span the format after expansion of log-uniform data") {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::UniformLog;
    spec.shape = {128};
    spec.outlier_scale = 100.0;
    spec.seed = 5;
    const Tensor x = generate(spec);
    const ExpandedQuantState state = expand_quantize(x, 128, Fp8Format::e4m3());
    // Histogram of |decode| values: both the subnormal region and the top
    // binade must be populated once the range is expanded to 229376.
    int subnormal = 0, near_max = 0;
    for (uint8_t code : state.quantized.codes) {
        const float v = std::fabs(decode_byte(code, Fp8Format::e4m3()));
        if (v > 0.0f && v < 0x1p-6f) ++subnormal;
        if (v >= 256.0f) ++near_max;
    }
    CHECK(subnormal > 0);
    CHECK(near_max > 0);
}

TEST_CASE("power-of-two group rescaling changes neither k nor codes") {
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor g = random_group(128, 15000 + trial, 1e4);
        const ExpandedQuantState s0 = expand_quantize(g, 128, Fp8Format::e4m3());
        Tensor scaled(g.shape);
        for (int64_t i = 0; i < g.numel(); ++i) scaled[i] = std::ldexp(g[i], 5);
        const ExpandedQuantState s1 = expand_quantize(scaled, 128, Fp8Format::e4m3());
        CHECK(s0.params[0].k == s1.params[0].k);
        CHECK(s0.quantized.codes == s1.quantized.codes);
    }
}

TEST_CASE("degenerate groups pass through") {
    // All-zero group.
    const Tensor zeros({128});
    const ExpandedQuantState s = expand_quantize(zeros, 128, Fp8Format::e4m3());
    CHECK(s.params[0].degenerate);
    CHECK(s.params[0].k == 1.0f);
    for (float v : dequantize_contract(s).data) CHECK(v == 0.0f);
    // Constant-magnitude group: range 1, flagged, lossless through c.
    Tensor consts({128}, 0.25f);
    const ExpandedQuantState s2 = expand_quantize(consts, 128, Fp8Format::e4m3());
    CHECK(s2.params[0].degenerate);
    CHECK(s2.params[0].k == 1.0f);
    CHECK(s2.params[0].c == 0.25f);
    CHECK(max_rel_err(dequantize_contract(s2), consts) <= 1e-6);
}

TEST_CASE("lossless group at exactly the e4m3 range") {
    // Group {448, 2^-9} has range exactly 229376 -> k = 1; both endpoints are
    // representable so the round trip loses nothing beyond scale rounding.
    Tensor g({128});
    g[0] = 448.0f;
    for (int64_t i = 1; i < 128; ++i) g[i] = 0x1p-9f;
    const ExpandedQuantState s = expand_quantize(g, 128, Fp8Format::e4m3());
    CHECK(s.params[0].k == 1.0f);
    CHECK(max_rel_err(dequantize_contract(s), g) <= 0x1p-8);
}

TEST_CASE("expanded state stream round trip") {
    const Tensor g = random_group(256, 12345, 1e5);
    const ExpandedQuantState s = expand_quantize(g, 128, Fp8Format::e4m3());
    std::stringstream ss;
    write_expanded(ss, s);
    const ExpandedQuantState back = read_expanded(ss);
    CHECK(back.quantized.codes == s.quantized.codes);
    CHECK(back.quantized.scales == s.quantized.scales);
    REQUIRE(back.params.size() == s.params.size());
    for (size_t i = 0; i < s.params.size(); ++i) {
        CHECK(back.params[i].k == s.params[i].k);
        CHECK(back.params[i].c == s.params[i].c);
    }
    CHECK(dequantize_contract(back).data == dequantize_contract(s).data);
}
