#ifndef EEGDUAL_RNG_HPP
#define EEGDUAL_RNG_HPP

#include <cstdint>
#include <string_view>
#include <vector>

namespace eegdual {

// 64-bit FNV-1a, also used for config hashing.
std::uint64_t fnv1a(std::string_view s);
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull);

// Counter-based PRNG. Each consumer opens its own named stream so that any
// component can be re-run in isolation without disturbing the draw sequence
// of the others. Streams may additionally be keyed by integer coordinates
// (subject, trial, window) so no draw is ever shared across coordinates.
class RngStream {
public:
  RngStream(std::uint64_t seed, std::string_view name);
  RngStream(std::uint64_t seed, std::string_view name,
            std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0);

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal();
  double normal(double mean, double stddev);
  // Uniform integer on [0, n). n must be > 0.
  int below(int n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace eegdual

#endif
