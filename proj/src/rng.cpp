#include "eegdual/rng.hpp"

#include <cmath>
#include <numbers>

#include "eegdual/errors.hpp"

namespace eegdual {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

namespace {

// stafford mix13 finalizer
std::uint64_t mix(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
  return mix(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string_view name)
    : key_(combine(mix(seed), fnv1a(name))) {}

RngStream::RngStream(std::uint64_t seed, std::string_view name,
                     std::uint64_t k0, std::uint64_t k1, std::uint64_t k2)
    : key_(combine(combine(combine(combine(mix(seed), fnv1a(name)), k0), k1), k2)) {}

std::uint64_t RngStream::next_u64() {
  return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ull);
}

double RngStream::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RngStream::normal() {
  // u1 in (0, 1] keeps the log finite
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

int RngStream::below(int n) {
  if (n <= 0) throw UsageError("RngStream::below requires n > 0");
  // modulo bias is < 2^-32 for any realistic n
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

}  // namespace eegdual
