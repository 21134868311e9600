// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace phasor {

// All randomness derives from one master seed. Independent streams are
// addressed by name so that, e.g., parameter init is identical between two
// configs that share a subset of tensors, and data order does not depend on
// how many tensors were initialized before the data stream was opened.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic per-name stream derived from the master seed.
inline std::mt19937_64 make_stream(uint64_t master_seed, std::string_view name) {
  return std::mt19937_64(splitmix64(master_seed ^ fnv1a64(name)));
}

template <typename T, typename Rng>
void fill_gaussian(Rng& rng, T* out, int64_t n, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(dist(rng));
}

template <typename T, typename Rng>
void fill_uniform(Rng& rng, T* out, int64_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(dist(rng));
}

}  // namespace phasor
