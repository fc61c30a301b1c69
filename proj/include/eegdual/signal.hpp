#ifndef EEGDUAL_SIGNAL_HPP
#define EEGDUAL_SIGNAL_HPP

#include <string>
#include <vector>

#include "eegdual/tensor.hpp"

namespace eegdual {

// One windowed slice of a multi-channel recording, in microvolts.
struct RawWindow {
  int subject_id = 0;
  int trial_id = 0;
  int window_index = 0;
  double t0 = 0.0;       // seconds from trial start
  double fs = 0.0;       // Hz
  Tensor samples;        // [n_channels, n_samples]

  int channels() const { return samples.dim(0); }
  int length() const { return samples.dim(1); }
};

struct BandSpec {
  std::string label;
  double lo = 0.0;  // Hz
  double hi = 0.0;  // Hz
};

enum class FeatureKind { PSD, DE };

// Per-window feature matrix: one row per electrode, one column per band.
struct FeatureArray {
  int subject_id = 0;
  int trial_id = 0;
  int window_index = 0;
  FeatureKind kind = FeatureKind::PSD;
  Tensor values;  // [n_channels, n_bands]
};

// Splits a trial into fixed-length windows; partial tails are dropped.
std::vector<RawWindow> sliding_windows(const Tensor& trial_samples, double fs,
                                       double win_len_s, double hop_s,
                                       int subject_id = 0, int trial_id = 0);

// Welch band power: 256-sample segments (or the window length if shorter),
// 50% overlap, Hann window. A band's value is the sum of one-sided bin powers
// whose center frequency falls in [lo, hi); units are amplitude^2.
FeatureArray band_power_psd(const RawWindow& w, const std::vector<BandSpec>& bands);

// Gaussian differential entropy of each band-filtered channel:
// 0.5*ln(2*pi*e*max(var, var_floor)).
FeatureArray differential_entropy(const RawWindow& w, const std::vector<BandSpec>& bands);

// FFT-mask bandpass: zero every bin with center outside [lo, hi).
RawWindow bandpass(const RawWindow& w, double lo, double hi);

// Band file: one `label lo_hz hi_hz` per line, '#' comments.
std::vector<BandSpec> load_bands(const std::string& path);
std::vector<BandSpec> default_bands();

inline constexpr double kVarianceFloor = 1e-12;

}  // namespace eegdual

#endif
