#pragma once

#include <array>
#include <cstdint>

namespace treeqn {

// splitmix64 finalizer; also used to expand seeds into full generator state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// xoshiro256** with deterministic, platform-independent output streams.
// All randomness in the project flows through this type so that runs are
// reproducible from a single master seed.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    // Counter-based stream splitting: stream i of a master seed is an
    // independent generator. Used to derive per-env and init seeds.
    static Rng split(std::uint64_t master_seed, std::uint64_t stream) {
        std::uint64_t sm = master_seed + 0x9E3779B97F4A7C15ull * (stream + 1);
        return Rng(splitmix64(sm));
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

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    int next_int(int n) {
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % bound);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    const std::array<std::uint64_t, 4>& state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
};

}  // namespace treeqn
