// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>

namespace ffprune {

// splitmix64; used to derive per-component seeds from the master seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d4a2ca9da6d2b1ULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic sub-seed: seed for component `name`, stream index `idx`.
inline std::uint64_t sub_seed(std::uint64_t master, std::string_view name, std::uint64_t idx = 0) {
    return mix64(master ^ fnv1a(name) ^ mix64(idx));
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::string_view name, std::uint64_t idx = 0) {
    return std::mt19937_64(sub_seed(master, name, idx));
}

// Write `contents` to `path` atomically (temp file + rename).
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);

// Effective internal parallelism: min(FFPRUNE_THREADS, hardware_concurrency), at least 1.
int thread_budget();

}  // namespace ffprune
