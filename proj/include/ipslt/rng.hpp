#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ipslt {

// Seedable, splittable random source.
//
// Child streams are derived from the root seed with splitmix64 over
// (seed, label hash, index), so a child is independent of how many draws
// the parent has made. Draws come from mt19937_64; the floating-point
// helpers are built directly on the raw 64-bit output (no std::
// distributions), so sequences depend only on the engine, which the
// standard pins down exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  // Independent child stream; same (label, index) always yields the same
  // stream regardless of the parent's position.
  Rng split(std::string_view label, std::uint64_t index = 0) const;

  std::uint64_t next_u64();

  // [0, 1)
  double uniform();
  // (0, 1]
  double uniform_open();
  // Standard normal via Box-Muller (two uniforms per draw).
  double normal();
  bool bernoulli(double p);
  // Uniform integer in [lo, hi], inclusive on both ends.
  int uniform_int(int lo, int hi);

  // Fisher-Yates; spelled out so the permutation does not depend on the
  // standard library's std::shuffle implementation.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(
          uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Engine state round-trip for checkpoints.
  std::string state_string() const;
  void restore_state(const std::string& s);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_label(std::string_view label);

}  // namespace ipslt
