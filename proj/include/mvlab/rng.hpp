#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace mvlab::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

/// Philox4x32 with 10 rounds.
inline Counter philox4x32(Counter ctr, Key key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/**
 * @brief Sub-seed for a named role.
 *
 * key = mix64(seed ^ mix64(fnv1a64(label))). Every random stream in the
 * library is keyed this way, so a single 64-bit seed determines all output.
 */
inline std::uint64_t derive_key(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return mix64(seed ^ mix64(h));
}

inline Key split_key(std::uint64_t key) {
    return {static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
}

/// Uniform in [0,1) with 53 random bits.
inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t x = (static_cast<std::uint64_t>(hi) << 32) | lo;
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/**
 * @brief Fill `out` with i.i.d. standard normals for (stream, step, index).
 *
 * The counter is (step low word, step high 16 bits | pair << 16, index low,
 * index high); each Philox block gives one Box-Muller pair.
 */
inline void gaussians(std::uint64_t key, std::uint64_t step, std::uint64_t index, std::span<double> out) {
    const Key k = split_key(key);
    const std::size_t n = out.size();
    for (std::size_t pair = 0; 2 * pair < n; ++pair) {
        const Counter ctr{static_cast<std::uint32_t>(step),
                          static_cast<std::uint32_t>((step >> 32) & 0xFFFFu) |
                              (static_cast<std::uint32_t>(pair) << 16),
                          static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
        const Counter r = philox4x32(ctr, k);
        const double u1 = 1.0 - to_unit(r[0], r[1]);  // (0, 1]
        const double u2 = to_unit(r[2], r[3]);
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * std::numbers::pi * u2;
        out[2 * pair] = rad * std::cos(ang);
        if (2 * pair + 1 < n) out[2 * pair + 1] = rad * std::sin(ang);
    }
}

/// One uniform in [0,1) for (stream, step, index).
inline double uniform(std::uint64_t key, std::uint64_t step, std::uint64_t index) {
    const Counter ctr{static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32) | 0x80000000u,
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    const Counter r = philox4x32(ctr, split_key(key));
    return to_unit(r[0], r[1]);
}

}  // namespace mvlab::rng
