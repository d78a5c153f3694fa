#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace fedinject::rng {

// Deterministic, splittable randomness. Every random decision in the project
// derives its stream from an explicit key (seed + structural tags), never from
// a shared sequential stream, so concurrent clients and single-task vs
// multi-task runs consume identical per-component randomness.

/// SplitMix64 finalizer; good avalanche, stable across platforms.
std::uint64_t mix(std::uint64_t x);

/// FNV-1a over UTF-8 bytes, then mixed.
std::uint64_t hash_str(std::string_view s);

/// Combine a seed with structural tags into an independent stream key.
std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);
std::uint64_t derive(std::uint64_t seed, std::string_view tag);
std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a);
std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b);
std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b,
                     std::uint64_t c);

/// SplitMix64 stream. Cheap to construct per use site; do not share across
/// structural units.
class Stream {
public:
    explicit Stream(std::uint64_t key) : state_(key) {}

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n);

    /// Standard normal via Box-Muller (one value per call, no cache).
    double normal();

    /// Fisher-Yates shuffle, deterministic for a given key.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.empty()) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

} // namespace fedinject::rng
