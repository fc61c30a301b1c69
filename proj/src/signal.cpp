#include "eegdual/signal.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eegdual/errors.hpp"
#include "eegdual/fft.hpp"

namespace eegdual {

namespace {

void check_bands(const std::vector<BandSpec>& bands, double fs) {
  if (bands.empty()) throw ConfigError("no frequency bands given");
  for (const BandSpec& b : bands) {
    if (!(b.lo > 0.0 && b.lo < b.hi))
      throw ConfigError("band '" + b.label + "': need 0 < lo < hi");
    if (b.hi > fs / 2.0)
      throw ConfigError("band '" + b.label + "' exceeds the Nyquist frequency " +
                        std::to_string(fs / 2.0) + " Hz");
  }
}

double sample_variance(const std::vector<double>& y) {
  const std::size_t n = y.size();
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);
  double acc = 0.0;
  for (double v : y) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(n - 1);
}

// Zero every bin whose center frequency lies outside [lo, hi); mirror bins
// are kept symmetric so the inverse transform stays real.
void mask_spectrum(std::vector<std::complex<double>>& spec, double fs, double lo, double hi) {
  const std::size_t n = spec.size();
  for (std::size_t k = 0; k < n; ++k) {
    double f = static_cast<double>(k) * fs / static_cast<double>(n);
    if (2 * k > n) f = fs - f;  // magnitude of the negative frequency
    if (!(f >= lo && f < hi)) spec[k] = 0.0;
  }
}

}  // namespace

std::vector<RawWindow> sliding_windows(const Tensor& trial_samples, double fs,
                                       double win_len_s, double hop_s,
                                       int subject_id, int trial_id) {
  if (trial_samples.ndim() != 2) throw DimensionError("trial samples must be [channels, samples]");
  if (fs <= 0.0) throw ConfigError("sampling rate must be positive");
  if (hop_s <= 0.0) throw ConfigError("hop must be positive");
  const long win_n = std::lround(win_len_s * fs);
  if (win_n < 2) throw ConfigError("window shorter than two samples");
  const int channels = trial_samples.dim(0);
  const long total = trial_samples.dim(1);

  std::vector<RawWindow> out;
  for (int k = 0;; ++k) {
    long start = std::llround(static_cast<double>(k) * hop_s * fs);
    if (start + win_n > total) break;
    RawWindow w;
    w.subject_id = subject_id;
    w.trial_id = trial_id;
    w.window_index = k;
    w.t0 = static_cast<double>(k) * hop_s;
    w.fs = fs;
    w.samples = Tensor(Shape{channels, static_cast<int>(win_n)});
    for (int c = 0; c < channels; ++c)
      for (long i = 0; i < win_n; ++i)
        w.samples.at(c, static_cast<int>(i)) = trial_samples.at(c, static_cast<int>(start + i));
    out.push_back(std::move(w));
  }
  return out;
}

FeatureArray band_power_psd(const RawWindow& w, const std::vector<BandSpec>& bands) {
  check_bands(bands, w.fs);
  const int n = w.length();
  const int L = std::min(256, n);
  const int hop = std::max(1, L / 2);
  const int segments = 1 + (n - L) / hop;

  // periodic Hann: a DC input leaks only into bins 0 and +-1
  std::vector<double> hann(static_cast<std::size_t>(L));
  double win_ssq = 0.0;
  for (int i = 0; i < L; ++i) {
    hann[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / static_cast<double>(L)));
    win_ssq += hann[static_cast<std::size_t>(i)] * hann[static_cast<std::size_t>(i)];
  }

  const int half = L / 2;  // one-sided bins 0..half
  FeatureArray fa;
  fa.subject_id = w.subject_id;
  fa.trial_id = w.trial_id;
  fa.window_index = w.window_index;
  fa.kind = FeatureKind::PSD;
  fa.values = Tensor(Shape{w.channels(), static_cast<int>(bands.size())});

  std::vector<double> onesided(static_cast<std::size_t>(half) + 1);
  std::vector<double> seg(static_cast<std::size_t>(L));
  for (int c = 0; c < w.channels(); ++c) {
    std::fill(onesided.begin(), onesided.end(), 0.0);
    for (int s = 0; s < segments; ++s) {
      for (int i = 0; i < L; ++i)
        seg[static_cast<std::size_t>(i)] =
            w.samples.at(c, s * hop + i) * hann[static_cast<std::size_t>(i)];
      auto spec = fft_real(seg);
      const double norm = 1.0 / (static_cast<double>(L) * win_ssq);
      onesided[0] += std::norm(spec[0]) * norm;
      for (int k = 1; k < half + (L % 2 == 0 ? 0 : 1); ++k)
        onesided[static_cast<std::size_t>(k)] +=
            (std::norm(spec[static_cast<std::size_t>(k)]) +
             std::norm(spec[static_cast<std::size_t>(L - k)])) * norm;
      if (L % 2 == 0)
        onesided[static_cast<std::size_t>(half)] += std::norm(spec[static_cast<std::size_t>(half)]) * norm;
    }
    for (std::size_t k = 0; k < onesided.size(); ++k) onesided[k] /= static_cast<double>(segments);
    for (std::size_t b = 0; b < bands.size(); ++b) {
      double acc = 0.0;
      for (int k = 0; k <= half; ++k) {
        double f = static_cast<double>(k) * w.fs / static_cast<double>(L);
        if (f >= bands[b].lo && f < bands[b].hi) acc += onesided[static_cast<std::size_t>(k)];
      }
      fa.values.at(c, static_cast<int>(b)) = acc;
    }
  }
  return fa;
}

FeatureArray differential_entropy(const RawWindow& w, const std::vector<BandSpec>& bands) {
  check_bands(bands, w.fs);
  const int n = w.length();
  FeatureArray fa;
  fa.subject_id = w.subject_id;
  fa.trial_id = w.trial_id;
  fa.window_index = w.window_index;
  fa.kind = FeatureKind::DE;
  fa.values = Tensor(Shape{w.channels(), static_cast<int>(bands.size())});

  std::vector<double> chan(static_cast<std::size_t>(n));
  std::vector<double> filtered(static_cast<std::size_t>(n));
  for (int c = 0; c < w.channels(); ++c) {
    for (int i = 0; i < n; ++i) chan[static_cast<std::size_t>(i)] = w.samples.at(c, i);
    auto spec = fft_real(chan);
    for (std::size_t b = 0; b < bands.size(); ++b) {
      auto masked = spec;
      mask_spectrum(masked, w.fs, bands[b].lo, bands[b].hi);
      fft(masked, true);
      for (int i = 0; i < n; ++i) filtered[static_cast<std::size_t>(i)] = masked[static_cast<std::size_t>(i)].real();
      double var = sample_variance(filtered);
      fa.values.at(c, static_cast<int>(b)) =
          0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * std::max(var, kVarianceFloor));
    }
  }
  return fa;
}

RawWindow bandpass(const RawWindow& w, double lo, double hi) {
  if (!(lo > 0.0 && lo < hi && hi <= w.fs / 2.0))
    throw ConfigError("bandpass: need 0 < lo < hi <= fs/2");
  const int n = w.length();
  RawWindow out = w;
  std::vector<double> chan(static_cast<std::size_t>(n));
  for (int c = 0; c < w.channels(); ++c) {
    for (int i = 0; i < n; ++i) chan[static_cast<std::size_t>(i)] = w.samples.at(c, i);
    auto spec = fft_real(chan);
    mask_spectrum(spec, w.fs, lo, hi);
    fft(spec, true);
    for (int i = 0; i < n; ++i) out.samples.at(c, i) = spec[static_cast<std::size_t>(i)].real();
  }
  return out;
}

std::vector<BandSpec> load_bands(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open band file: " + path);
  std::vector<BandSpec> bands;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    BandSpec b;
    if (!(ss >> b.label)) continue;  // blank line
    if (!(ss >> b.lo >> b.hi))
      throw DataError(path + ":" + std::to_string(lineno) + ": expected `label lo_hz hi_hz`");
    std::string extra;
    if (ss >> extra)
      throw DataError(path + ":" + std::to_string(lineno) + ": trailing tokens");
    if (!(b.lo > 0.0 && b.lo < b.hi))
      throw DataError(path + ":" + std::to_string(lineno) + ": need 0 < lo < hi");
    bands.push_back(std::move(b));
  }
  if (bands.empty()) throw DataError(path + ": no bands defined");
  return bands;
}

std::vector<BandSpec> default_bands() {
  return {{"delta", 1.0, 4.0},
          {"theta", 4.0, 8.0},
          {"alpha", 8.0, 14.0},
          {"beta", 14.0, 31.0},
          {"gamma", 31.0, 50.0}};
}

}  // namespace eegdual
