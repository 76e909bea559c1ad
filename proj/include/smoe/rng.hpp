#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "smoe/common.hpp"

namespace smoe {

// xoshiro256** seeded through splitmix64. The algorithm is frozen: integer
// state transitions only, so equal seeds give equal streams on every
// platform. Gaussian draws use plain Box-Muller with no cached spare, which
// keeps the serializable state to the four words below.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : state_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Multiply-shift rejection-free bound; bias is < 2^-64, irrelevant here.
        return std::uint64_t((__uint128_t(next_u64()) * n) >> 64);
    }

    double normal() {
        // u1 in (0, 1] so the log is finite.
        const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Independent child stream; used to give each decoder its own init stream.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t x = state_[0] ^ (0x9e3779b97f4a7c15ULL + stream);
        Rng child(0);
        for (auto& w : child.state_) w = splitmix64(x);
        return child;
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = std::uint64_t(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
};

} // namespace smoe
