#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace ncmi {

// splitmix64 finalizer, used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// uniform/normal/shuffle are hand-rolled on top of it so that sequences are
// bit-identical across platforms and library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // Uniform in (0, 1): 53 significant bits shifted off the zero endpoint.
  double uniform() { return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with a cached spare draw.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Unbiased integer in [0, n) via masked rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    std::uint64_t mask = ~0ull >> std::countl_zero(n - 1);
    std::uint64_t r;
    do {
      r = gen_() & mask;
    } while (r >= n);
    return r;
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Named sub-streams of a base seed, so that e.g. weight init and batch
// shuffling never consume from the same sequence.
enum class RngStream : std::uint64_t {
  model_init = 1,
  centroid_init = 2,
  data_gen = 3,
  epoch_shuffle = 4,
  augment = 5,
  probe = 6,
  test = 7,
};

inline Rng stream_rng(std::uint64_t seed, RngStream stream, std::uint64_t extra = 0) {
  return Rng(mix_seed(mix_seed(seed) ^ mix_seed(static_cast<std::uint64_t>(stream) + 0x1000 * extra)));
}

}  // namespace ncmi
