#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cliplab {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to decorrelate derived seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Child seed for a named purpose; the same (seed, tag) always maps to the same stream.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
  return mix64(seed ^ mix64(fnv1a64(tag)));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return mix64(seed ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::string_view tag) {
  return Rng(derive_seed(seed, tag));
}

// One seed fanned out into independent per-purpose streams. Drawing more
// unique features never shifts the latent sequence, and vice versa.
class SampleStreams {
 public:
  explicit SampleStreams(std::uint64_t seed)
      : seed_(seed),
        latent_(derive_seed(seed, "latent")),
        xi_(derive_seed(seed, "xi")),
        zeta_(derive_seed(seed, "zeta")),
        aux_(derive_seed(seed, "aux")) {}

  std::uint64_t seed() const noexcept { return seed_; }
  Rng& latent() noexcept { return latent_; }
  Rng& xi() noexcept { return xi_; }
  Rng& zeta() noexcept { return zeta_; }
  Rng& aux() noexcept { return aux_; }

 private:
  std::uint64_t seed_;
  Rng latent_;
  Rng xi_;
  Rng zeta_;
  Rng aux_;
};

}  // namespace cliplab
