#include "fedinject/rng.hpp"

#include <cmath>
#include <numbers>

namespace fedinject::rng {

std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix(h);
}

std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = mix(seed);
    for (std::uint64_t t : tags) h = mix(h ^ t);
    return h;
}

std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
    return derive(seed, {hash_str(tag)});
}

std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a) {
    return derive(seed, {hash_str(tag), a});
}

std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b) {
    return derive(seed, {hash_str(tag), a, b});
}

std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b,
                     std::uint64_t c) {
    return derive(seed, {hash_str(tag), a, b, c});
}

std::uint64_t Stream::next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Stream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Stream::uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

double Stream::normal() {
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    const double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

} // namespace fedinject::rng
