#ifndef SMOOTHCERT_RNG_HPP
#define SMOOTHCERT_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>

namespace smoothcert {

/// Stream purpose tags. Every random draw in the toolkit comes from a stream
/// keyed by (seed, tag, indices...), so results never depend on batch size,
/// worker count, or evaluation order.
namespace streams {
inline constexpr std::uint64_t kInit = 1;            // parameter initialization
inline constexpr std::uint64_t kTrainNoise = 2;      // per-(epoch, batch) augmentation
inline constexpr std::uint64_t kShuffle = 3;         // per-epoch batch order
inline constexpr std::uint64_t kEvalNoise = 4;       // per-example eval noise
inline constexpr std::uint64_t kCertifySelect = 5;   // certification phase 1
inline constexpr std::uint64_t kCertifyEstimate = 6; // certification phase 2
inline constexpr std::uint64_t kPredict = 7;
inline constexpr std::uint64_t kSpsaPerturb = 8;
inline constexpr std::uint64_t kSpsaBatch = 9;
inline constexpr std::uint64_t kSpsaNoise = 10;
inline constexpr std::uint64_t kSynthProto = 11;
inline constexpr std::uint64_t kSynthSample = 12;
inline constexpr std::uint64_t kSubset = 13;
}  // namespace streams

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Collapses (seed, tag, indices...) into one 64-bit stream key. The fold is
/// order-sensitive: re-hashing the accumulator before each xor keeps
/// (a, b, ...) and (b, a, ...) apart.
template <class... Parts>
constexpr std::uint64_t derive_key(std::uint64_t seed, Parts... parts) {
  std::uint64_t h = splitmix64(seed ^ 0x243f6a8885a308d3ULL);
  ((h = splitmix64(splitmix64(h) ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

/// Deterministic stream generator. mt19937_64 is fully specified by the
/// standard and the Gaussian transform is pinned here (Box-Muller), so a key
/// reproduces the same values on every platform and stdlib.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : eng_(key) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  /// +1 or -1 with equal probability.
  int rademacher() { return (eng_() & 1u) ? 1 : -1; }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Modulo bias is < 2^-53 for the sizes used here (datasets, batches).
    return eng_() % n;
  }

  template <class Derived>
  void fill_normal(Eigen::DenseBase<Derived>& out, double stddev) {
    using S = typename Derived::Scalar;
    for (Eigen::Index i = 0; i < out.size(); ++i)
      out.derived().data()[i] = static_cast<S>(stddev * normal());
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, std::uint64_t key) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(key);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_RNG_HPP
