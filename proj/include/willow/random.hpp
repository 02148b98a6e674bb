#pragma once

// Seeded random streams.
//
// Every random draw in the library comes from a RandomStream whose seed is a
// pure function of (master seed, label, replicate, node).  The key is mixed
// with splitmix64 so that neighbouring keys give unrelated mt19937_64 states.
// Results therefore never depend on thread count or scheduling order.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace willow {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used only to turn stream labels into integers.
inline constexpr std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct StreamKey {
  std::uint64_t master = 0;
  std::uint64_t label = 0;
  std::uint64_t replicate = 0;
  std::uint64_t node = 0;

  StreamKey with_replicate(std::uint64_t r) const { return {master, label, r, node}; }
  StreamKey with_node(std::uint64_t n) const { return {master, label, replicate, n}; }
  StreamKey with_label(std::string_view l) const {
    return {master, splitmix64(label ^ hash_label(l)), replicate, node};
  }

  std::uint64_t seed() const {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ label);
    h = splitmix64(h ^ replicate);
    h = splitmix64(h ^ node);
    return h;
  }
};

inline StreamKey make_key(std::uint64_t master, std::string_view label) {
  return {master, hash_label(label), 0, 0};
}

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}
  explicit RandomStream(const StreamKey& key) : engine_(key.seed()) {}

  /// Uniform on (0, 1): 53 random bits, never 0.
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }
  double exponential(double rate) { return -std::log(uniform()) / rate; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }
  std::uint64_t bits() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Poisson draw; sequential inversion below mean 30.
inline long poisson(RandomStream& rng, double mean) {
  if (mean <= 0.0) return 0;
  if (mean < 30.0) {
    long k = 0;
    double p = std::exp(-mean);
    double cdf = p;
    const double u = rng.uniform();
    while (u > cdf) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
      if (p < 1e-300 && cdf < u) break;
    }
    return k;
  }
  std::poisson_distribution<long> dist(mean);
  return dist(rng.engine());
}

}  // namespace willow
