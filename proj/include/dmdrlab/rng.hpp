#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dmdrlab {

// Serializable generator state. `spare` caches the second Box-Muller draw.
struct RngState {
    std::array<std::uint64_t, 4> words{};
    bool has_spare = false;
    double spare = 0.0;
    std::uint64_t counter = 0;

    friend bool operator==(const RngState&, const RngState&) = default;
};

// xoshiro256** seeded through splitmix64. Normals come from the
// Box-Muller transform of two uniform draws: r = sqrt(-2 ln u1),
// (r cos 2πu2, r sin 2πu2), with u1 in (0, 1].
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : state_.words) {
            w = splitmix64(x);
        }
        state_.has_spare = false;
        state_.spare = 0.0;
        state_.counter = 0;
    }

    std::uint64_t next_u64() {
        auto& s = state_.words;
        const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        ++state_.counter;
        return result;
    }

    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1].
    double uniform_open_low() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    double normal() {
        if (state_.has_spare) {
            state_.has_spare = false;
            return state_.spare;
        }
        const double u1 = uniform_open_low();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        state_.spare = r * std::sin(theta);
        state_.has_spare = true;
        return r * std::cos(theta);
    }

    // Child generator with an independent stream, keyed by a label.
    Rng fork(std::string_view label) const {
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : label) {
            h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        }
        std::uint64_t x = state_.words[0] ^ rotl(state_.words[3], 29) ^ h;
        return Rng(splitmix64(x));
    }

    std::uint64_t draws() const noexcept { return state_.counter; }
    const RngState& state() const noexcept { return state_; }
    void set_state(const RngState& s) { state_ = s; }

    friend bool operator==(const Rng& a, const Rng& b) { return a.state_ == b.state_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    RngState state_;
};

}  // namespace dmdrlab
