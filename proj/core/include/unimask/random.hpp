#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace unimask {

/// Mix a 64-bit value (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

/// Derive a named sub-seed. Streams keyed by distinct purposes are independent,
/// so adding a new consumer never perturbs an existing one.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view purpose);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

/// Seeded generator that counts how many variates it has produced.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() {
    ++draws_;
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  double normal() {
    ++draws_;
    return normal_(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    ++draws_;
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::uint64_t draws() const { return draws_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uint64_t draws_ = 0;
};

}  // namespace unimask
