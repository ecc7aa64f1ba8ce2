#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace petsynth {

/// Deterministic random number generator.
///
/// The raw stream is std::mt19937_64, whose output sequence is fixed by the
/// C++ standard, so identical seeds give identical streams on every platform.
/// All distributions (uniform, normal, poisson) are implemented here on top of
/// the raw stream instead of the standard <random> distributions, which are
/// implementation-defined and would break cross-platform reproducibility.
///
/// Algorithm identifier: "mt19937_64/u53/box-muller/ptrs".
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  static const char* algorithm() { return "mt19937_64/u53/box-muller/ptrs"; }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Standard normal via Box-Muller. Two raw draws per call, no cached spare.
  double normal();

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  /// Poisson sample. Inversion by sequential search for small means,
  /// transformed rejection (PTRS) for lambda >= 10.
  std::uint64_t poisson(double lambda);

  /// Derive an independent child generator for stream index `stream`.
  /// Mixing is splitmix64-based so nearby indices give unrelated seeds.
  static Rng fork(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// splitmix64 mixing step, used for seed derivation.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace petsynth
