#ifndef EEGDUAL_DATA_IO_HPP
#define EEGDUAL_DATA_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "eegdual/signal.hpp"
#include "eegdual/tensor.hpp"
#include "eegdual/topomap.hpp"

namespace eegdual {

struct DatasetManifest {
  std::string name;
  std::vector<int> subjects;
  std::vector<std::string> class_labels;   // ordered
  std::string layout_path;                 // resolved to an absolute/openable path
  FeatureKind feature_kind = FeatureKind::DE;
  int n_bands = 0;
  std::string csv_path;
};

struct SampleRecord {
  int subject = 0;
  int trial = 0;
  int window = 0;
  int label = 0;
  FeatureArray features;
};

// A loaded dataset: immutable after construction, shared read-only by folds.
struct Dataset {
  DatasetManifest manifest;
  ElectrodeLayout layout;
  std::vector<SampleRecord> samples;  // sorted by (subject, trial, window)

  int n_classes() const { return static_cast<int>(manifest.class_labels.size()); }
  int channels() const { return layout.size(); }
  int bands() const { return manifest.n_bands; }
};

// Index-based slice of a dataset. Label reads are counted so tests can prove
// a training path never looked at held-out labels.
struct DatasetView {
  const Dataset* ds = nullptr;
  std::vector<std::size_t> indices;
  mutable long label_reads = 0;

  std::size_t size() const { return indices.size(); }
  const Tensor& features(std::size_t k) const {
    return ds->samples[indices[k]].features.values;
  }
  int subject(std::size_t k) const { return ds->samples[indices[k]].subject; }
  int trial(std::size_t k) const { return ds->samples[indices[k]].trial; }
  int label(std::size_t k) const {
    ++label_reads;
    return ds->samples[indices[k]].label;
  }
};

DatasetView full_view(const Dataset& ds);

// ---- layout ----
// One electrode per line: `label x y z region hemisphere`, hemisphere L|R|M.
// Positions within 10% of unit norm are normalized; others are rejected.
// Region tokens are re-indexed densely in order of first appearance.
ElectrodeLayout load_layout(const std::string& path);

// ---- feature CSV ----
// Header: subject,trial,window,channel,band,value,label
void write_features_csv(const std::string& path, const Dataset& ds);
std::vector<SampleRecord> load_features_csv(const std::string& path,
                                            const DatasetManifest& manifest,
                                            const ElectrodeLayout& layout);
// Manifest-less variant for visualization tooling: band and class counts are
// inferred from the data (same per-window completeness rules).
std::vector<SampleRecord> load_features_csv_loose(const std::string& path,
                                                  const ElectrodeLayout& layout,
                                                  int* n_bands_out, int* n_classes_out);

// ---- manifest JSON ----
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);
Dataset load_dataset(const std::string& manifest_path);

// ---- synthetic generator ----
struct SyntheticSpec {
  std::string name = "synthetic";
  int subjects = 6;
  int trials_per_subject = 8;
  int windows_per_trial = 20;
  int classes = 4;
  int bands = 5;
  double pattern_amplitude = 1.0;
  double sigma_subject = 0.5;   // per-subject feature offset scale
  double sigma_noise = 0.5;     // per-window observation noise
  std::uint64_t seed = 1;
  std::vector<Tensor> explicit_patterns;  // optional, one [regions x bands] per class
};

SyntheticSpec load_synthetic_spec(const std::string& path);

// Per-class mean patterns over (region, band) cells plus per-subject offsets
// plus observation noise, all from coordinate-keyed streams.
Dataset generate_synthetic(const SyntheticSpec& spec, const ElectrodeLayout& layout,
                           const std::string& layout_path);

// Class mean patterns used by a spec ([classes][regions x bands]).
std::vector<Tensor> synthetic_patterns(const SyntheticSpec& spec, int regions);

// ---- model files ----
struct ModelBlocks {
  std::string kind;          // hrnn | cnn | capsule | fusion-output | ...
  std::string config_echo;   // canonical `key = value` text
  std::vector<std::pair<std::string, Tensor>> blocks;
};

std::vector<unsigned char> save_model_bytes(const ModelBlocks& m);
ModelBlocks load_model_bytes(const std::vector<unsigned char>& bytes);
void save_model_file(const std::string& path, const ModelBlocks& m);
ModelBlocks load_model_file(const std::string& path);

// ---- raw EEG fixture files (test/CLI input for feature extraction) ----
struct RawTrial {
  int subject = 0;
  int trial = 0;
  int label = 0;  // emotion class of the trial
  double fs = 0.0;
  std::vector<std::string> channel_labels;
  Tensor samples;  // [channels, n_samples]
};

void write_raw_eeg(const std::string& path, const RawTrial& t);
RawTrial read_raw_eeg(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t n);

}  // namespace eegdual

#endif
