#include "ipslt/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "ipslt/errors.hpp"

namespace ipslt {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_label(std::string_view label) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::string_view label, std::uint64_t index) const {
  std::uint64_t child = splitmix64(seed_ ^ splitmix64(hash_label(label) + index));
  return Rng(child);
}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() {
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform_open();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

bool Rng::bernoulli(double p) {
  if (p < 0.0 || p > 1.0) throw UsageError("bernoulli: p must be in [0,1]");
  return uniform() < p;
}

int Rng::uniform_int(int lo, int hi) {
  if (lo > hi) throw UsageError("uniform_int: empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi) - lo + 1;
  // rejection sampling keeps the draw unbiased
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<int>(x % span);
}

std::string Rng::state_string() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::restore_state(const std::string& s) {
  std::istringstream is(s);
  is >> seed_ >> engine_;
  if (!is) throw ParseError("rng: malformed state string");
}

}  // namespace ipslt
