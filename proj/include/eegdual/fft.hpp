#ifndef EEGDUAL_FFT_HPP
#define EEGDUAL_FFT_HPP

#include <complex>
#include <vector>

namespace eegdual {

// In-place complex FFT for power-of-two lengths; Bluestein otherwise.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Forward transform of a real signal, full spectrum of length n.
std::vector<std::complex<double>> fft_real(const std::vector<double>& x);

}  // namespace eegdual

#endif
