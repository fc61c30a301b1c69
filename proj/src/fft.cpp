#include "eegdual/fft.hpp"

#include <cmath>
#include <numbers>

namespace eegdual {

namespace {

bool is_pow2(std::size_t n) { return n && (n & (n - 1)) == 0; }

void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

// Bluestein's algorithm: arbitrary-length DFT as a power-of-two convolution.
void fft_bluestein(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;

  std::vector<std::complex<double>> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small
    std::size_t k2 = (k * k) % (2 * n);
    double ang = std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
    if (!inverse) ang = -ang;
    chirp[k] = std::complex<double>(std::cos(ang), std::sin(ang));
  }

  std::vector<std::complex<double>> p(m), q(m);
  for (std::size_t k = 0; k < n; ++k) p[k] = a[k] * chirp[k];
  q[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) q[k] = q[m - k] = std::conj(chirp[k]);

  fft_pow2(p, false);
  fft_pow2(q, false);
  for (std::size_t k = 0; k < m; ++k) p[k] *= q[k];
  fft_pow2(p, true);

  for (std::size_t k = 0; k < n; ++k) a[k] = p[k] * chirp[k];
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

}  // namespace

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  if (a.size() <= 1) return;
  if (is_pow2(a.size()))
    fft_pow2(a, inverse);
  else
    fft_bluestein(a, inverse);
}

std::vector<std::complex<double>> fft_real(const std::vector<double>& x) {
  std::vector<std::complex<double>> a(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) a[i] = std::complex<double>(x[i], 0.0);
  fft(a, false);
  return a;
}

}  // namespace eegdual
