#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ntlab {

/// Seedable generator with platform-independent draws.
///
/// std::*_distribution output differs between standard libraries, so every
/// draw used by the pipeline goes through the helpers here, which depend only
/// on the raw mt19937_64 stream. Child generators are derived by name so that
/// each component gets an independent, reproducible stream from one run seed.
class Rng {
 public:
  static constexpr std::string_view kName = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01();
  /// Standard normal via Box-Muller.
  double normal();

  /// Independent stream keyed by (seed, name).
  Rng split(std::string_view name) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

}  // namespace ntlab
