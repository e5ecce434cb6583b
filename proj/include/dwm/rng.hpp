#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace dwm {

/// Philox4x32-10 counter-based generator. A (key, counter) pair fully
/// determines the output, so independent streams are addressed by key
/// rather than by advancing shared state.
class Philox4x32 {
  public:
    using Block = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Block generate(Block counter, Key key) {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += 0x9E3779B9u;
                key[1] += 0xBB67AE85u;
            }
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * counter[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * counter[2];
            counter = {static_cast<std::uint32_t>(p1 >> 32) ^ counter[1] ^ key[0], static_cast<std::uint32_t>(p1),
                       static_cast<std::uint32_t>(p0 >> 32) ^ counter[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        }
        return counter;
    }
};

/// Sequential stream over Philox blocks. `stream` selects the key; `seed`
/// is mixed into the upper counter words so (seed, stream) pairs never
/// share blocks.
class RandomStream {
  public:
    RandomStream(std::uint64_t seed, std::uint64_t stream)
        : key_{static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)},
          seed_hi_(static_cast<std::uint32_t>(seed >> 32)), seed_lo_(static_cast<std::uint32_t>(seed)) {}

    std::uint32_t next_u32() {
        if (used_ == 4) refill();
        return block_[used_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    /// Standard normal by the Box-Muller transform (both variates used).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Standard logistic variate.
    double logistic() {
        const double u = uniform();
        return std::log(u / (1.0 - u));
    }

    /// Uniform integer in [0, bound) without modulo bias.
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = bound == 0 ? 0 : (~std::uint64_t{0}) - (~std::uint64_t{0}) % bound;
        std::uint64_t v = 0;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % bound;
    }

  private:
    void refill() {
        block_ = Philox4x32::generate({counter_lo_, counter_hi_, seed_lo_, seed_hi_}, key_);
        if (++counter_lo_ == 0) ++counter_hi_;
        used_ = 0;
    }

    Philox4x32::Key key_;
    std::uint32_t seed_hi_;
    std::uint32_t seed_lo_;
    std::uint32_t counter_lo_ = 0;
    std::uint32_t counter_hi_ = 0;
    Philox4x32::Block block_{};
    int used_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dwm
