#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "ufedgan/common.hpp"

namespace ufed {

// Counter-based generator: output i is a pure integer mix of
// (seed, stream name, i), so any (seed, stream) pair replays the identical
// scalar sequence on every platform and both sides of a split/monolithic
// comparison can consume the same randomness independently.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream)
      : seed_(seed), stream_(stream), key_(derive_key(seed, stream)) {}

  std::uint64_t next_u64() {
    std::uint64_t z = key_ + (++counter_) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform on [0,1), 53-bit resolution.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1]; used where a log() follows.
  double next_double_open() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Standard normal via Box-Muller; second value of each pair is cached.
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = next_double_open();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n) via 128-bit multiply (no rejection loop).
  std::size_t next_index(std::size_t n) {
    if (n == 0) throw ContractError("Rng::next_index: n must be positive");
    return std::size_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  std::uint64_t seed() const { return seed_; }
  const std::string& stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t derive_key(std::uint64_t seed, std::string_view stream) {
    // FNV-1a over the stream name, folded with the seed.
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : stream) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ull;
    }
    std::uint64_t z = h ^ (seed * 0xD2B74407B1CE6E93ull + 0x8CB92BA72F3D8DD7ull);
    z = (z ^ (z >> 33)) * 0xFF51AFD7ED558CCDull;
    z = (z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53ull;
    return z ^ (z >> 33);
  }

 private:
  std::uint64_t seed_;
  std::string stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Marsaglia-Tsang gamma sampler; alpha < 1 is lifted via the boost identity
// Gamma(a) = Gamma(a+1) * U^(1/a).
inline double gamma_sample(Rng& rng, double alpha) {
  if (alpha <= 0.0) throw ContractError("gamma_sample: alpha must be positive");
  if (alpha < 1.0) {
    const double u = rng.next_double_open();
    return gamma_sample(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.next_normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = rng.next_double_open();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

}  // namespace ufed
