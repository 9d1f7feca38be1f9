#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace coatsim {

/// SplitMix64 generator (Steele, Lea & Flood's mixer; the java.util
/// SplittableRandom finalizer). Chosen for reproducibility: the whole stream
/// is defined by the few lines below, so any language can replay it.
///
///   state += 0x9E3779B97F4A7C15
///   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   output = z ^ (z >> 31)
///
/// Uniform doubles take the top 53 bits / 2^53. Normals use Box-Muller on two
/// uniforms. Sub-streams split off a parent seed by mixing in a stream id.
class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    static SplitMix64 split(uint64_t seed, uint64_t stream) {
        SplitMix64 mixer(seed ^ (0x5851F42D4C957F2DULL * (stream + 1)));
        return SplitMix64(mixer.next_u64());
    }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double next_double() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    /// Integer in [0, n).
    uint64_t next_below(uint64_t n) {
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms; the
    /// sibling value is cached).
    double next_normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

  private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace coatsim
