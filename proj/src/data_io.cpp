#include "eegdual/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

#include "eegdual/config.hpp"
#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

DatasetView full_view(const Dataset& ds) {
  DatasetView v;
  v.ds = &ds;
  v.indices.resize(ds.samples.size());
  for (std::size_t i = 0; i < v.indices.size(); ++i) v.indices[i] = i;
  return v;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

ElectrodeLayout load_layout(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open layout file: " + path);
  ElectrodeLayout layout;
  std::map<std::string, int> region_ids;
  std::vector<std::string> seen_labels;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    Electrode e;
    std::string region_token, hemi_token;
    if (!(ss >> e.label)) continue;
    if (!(ss >> e.x >> e.y >> e.z >> region_token >> hemi_token))
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected `label x y z region hemisphere`");
    std::string extra;
    if (ss >> extra) throw DataError(path + ":" + std::to_string(lineno) + ": trailing tokens");
    if (std::find(seen_labels.begin(), seen_labels.end(), e.label) != seen_labels.end())
      throw DataError(path + ":" + std::to_string(lineno) + ": duplicate electrode label '" +
                      e.label + "'");
    seen_labels.push_back(e.label);

    double norm = std::sqrt(e.x * e.x + e.y * e.y + e.z * e.z);
    if (!std::isfinite(norm) || std::abs(norm - 1.0) > 0.1)
      throw DataError(path + ":" + std::to_string(lineno) + ": position norm " +
                      std::to_string(norm) + " is not within 10% of unit length");
    e.x /= norm;
    e.y /= norm;
    e.z /= norm;

    auto [it, inserted] = region_ids.try_emplace(region_token,
                                                 static_cast<int>(region_ids.size()));
    e.region = it->second;

    if (hemi_token == "L")
      e.hemisphere = Hemisphere::Left;
    else if (hemi_token == "R")
      e.hemisphere = Hemisphere::Right;
    else if (hemi_token == "M")
      e.hemisphere = Hemisphere::Midline;
    else
      throw DataError(path + ":" + std::to_string(lineno) + ": hemisphere must be L, R or M");

    layout.electrodes.push_back(std::move(e));
  }
  if (layout.electrodes.empty()) throw DataError(path + ": no electrodes defined");
  layout.region_count = static_cast<int>(region_ids.size());
  return layout;
}

// ---------------------------------------------------------------------------
// feature CSV
// ---------------------------------------------------------------------------

void write_features_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "subject,trial,window,channel,band,value,label\n";
  for (const SampleRecord& s : ds.samples) {
    for (int c = 0; c < s.features.values.dim(0); ++c)
      for (int b = 0; b < s.features.values.dim(1); ++b)
        out << s.subject << ',' << s.trial << ',' << s.window << ','
            << ds.layout.electrodes[static_cast<std::size_t>(c)].label << ',' << b << ','
            << format_double(s.features.values.at(c, b)) << ',' << s.label << '\n';
  }
  if (!out) throw DataError("short write: " + path);
}

namespace {

int parse_int_field(const std::string& field, const std::string& path, int row,
                    const char* what) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(field, &pos);
    if (pos != field.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ":" + std::to_string(row) + ": bad " + what + " '" + field + "'");
  }
}

}  // namespace

std::vector<SampleRecord> load_features_csv(const std::string& path,
                                            const DatasetManifest& manifest,
                                            const ElectrodeLayout& layout) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature CSV: " + path);
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  ++row;
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "subject,trial,window,channel,band,value,label")
    throw DataError(path + ":1: unexpected header '" + line + "'");

  const int channels = layout.size();
  const int bands = manifest.n_bands;
  const int classes = static_cast<int>(manifest.class_labels.size());

  struct Key {
    int s, t, w;
    bool operator<(const Key& o) const {
      return std::tie(s, t, w) < std::tie(o.s, o.t, o.w);
    }
  };
  struct Cell {
    Tensor values;
    std::vector<std::uint8_t> seen;
    int label = -1;
    int first_row = 0;
  };
  std::map<Key, Cell> windows;

  while (std::getline(in, line)) {
    ++row;
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      auto comma = line.find(',', start);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (fields.size() != 7)
      throw DataError(path + ":" + std::to_string(row) + ": expected 7 fields, got " +
                      std::to_string(fields.size()));
    Key key{parse_int_field(fields[0], path, row, "subject"),
            parse_int_field(fields[1], path, row, "trial"),
            parse_int_field(fields[2], path, row, "window")};
    if (std::find(manifest.subjects.begin(), manifest.subjects.end(), key.s) ==
        manifest.subjects.end())
      throw DataError(path + ":" + std::to_string(row) + ": subject " + std::to_string(key.s) +
                      " not in the manifest");
    int ch = layout.index_of(fields[3]);
    if (ch < 0)
      throw DataError(path + ":" + std::to_string(row) + ": unknown channel label '" +
                      fields[3] + "'");
    int band = parse_int_field(fields[4], path, row, "band");
    if (band < 0 || band >= bands)
      throw DataError(path + ":" + std::to_string(row) + ": band " + std::to_string(band) +
                      " outside [0, " + std::to_string(bands) + ")");
    double value;
    try {
      std::size_t pos = 0;
      value = std::stod(fields[5], &pos);
      if (pos != fields[5].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(row) + ": bad value '" + fields[5] + "'");
    }
    if (!std::isfinite(value))
      throw DataError(path + ":" + std::to_string(row) + ": non-finite value");
    int label = parse_int_field(fields[6], path, row, "label");
    if (label < 0 || label >= classes)
      throw DataError(path + ":" + std::to_string(row) + ": label " + std::to_string(label) +
                      " outside [0, " + std::to_string(classes) + ")");

    auto [it, inserted] = windows.try_emplace(key);
    Cell& cell = it->second;
    if (inserted) {
      cell.values = Tensor(Shape{channels, bands});
      cell.seen.assign(static_cast<std::size_t>(channels) * bands, 0);
      cell.label = label;
      cell.first_row = row;
    } else if (cell.label != label) {
      throw DataError(path + ":" + std::to_string(row) + ": label disagrees with row " +
                      std::to_string(cell.first_row) + " of the same window");
    }
    std::size_t ci = static_cast<std::size_t>(ch) * bands + band;
    if (cell.seen[ci])
      throw DataError(path + ":" + std::to_string(row) + ": duplicate cell (channel '" +
                      fields[3] + "', band " + std::to_string(band) + ")");
    cell.seen[ci] = 1;
    cell.values.at(ch, band) = value;
  }

  std::vector<SampleRecord> samples;
  samples.reserve(windows.size());
  for (auto& [key, cell] : windows) {
    for (std::size_t i = 0; i < cell.seen.size(); ++i)
      if (!cell.seen[i])
        throw DataError(path + ": window (subject " + std::to_string(key.s) + ", trial " +
                        std::to_string(key.t) + ", window " + std::to_string(key.w) +
                        ") is missing cell (channel '" +
                        layout.electrodes[i / static_cast<std::size_t>(bands)].label +
                        "', band " + std::to_string(i % static_cast<std::size_t>(bands)) + ")");
    SampleRecord s;
    s.subject = key.s;
    s.trial = key.t;
    s.window = key.w;
    s.label = cell.label;
    s.features.subject_id = key.s;
    s.features.trial_id = key.t;
    s.features.window_index = key.w;
    s.features.kind = manifest.feature_kind;
    s.features.values = std::move(cell.values);
    if (manifest.feature_kind == FeatureKind::PSD)
      for (std::size_t i = 0; i < s.features.values.numel(); ++i)
        if (s.features.values[i] < 0.0)
          throw DataError(path + ": negative PSD value in window (subject " +
                          std::to_string(key.s) + ", trial " + std::to_string(key.t) +
                          ", window " + std::to_string(key.w) + ")");
    samples.push_back(std::move(s));
  }
  return samples;  // map order == (subject, trial, window) order
}

std::vector<SampleRecord> load_features_csv_loose(const std::string& path,
                                                  const ElectrodeLayout& layout,
                                                  int* n_bands_out, int* n_classes_out) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature CSV: " + path);
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  ++row;
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "subject,trial,window,channel,band,value,label")
    throw DataError(path + ":1: unexpected header '" + line + "'");

  struct Row {
    int s, t, w, ch, band, label;
    double value;
    int lineno;
  };
  std::vector<Row> rows;
  int max_band = -1, max_label = -1;
  while (std::getline(in, line)) {
    ++row;
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      auto comma = line.find(',', start);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (fields.size() != 7)
      throw DataError(path + ":" + std::to_string(row) + ": expected 7 fields");
    Row r;
    r.s = parse_int_field(fields[0], path, row, "subject");
    r.t = parse_int_field(fields[1], path, row, "trial");
    r.w = parse_int_field(fields[2], path, row, "window");
    r.ch = layout.index_of(fields[3]);
    if (r.ch < 0)
      throw DataError(path + ":" + std::to_string(row) + ": unknown channel label '" +
                      fields[3] + "'");
    r.band = parse_int_field(fields[4], path, row, "band");
    if (r.band < 0) throw DataError(path + ":" + std::to_string(row) + ": negative band");
    try {
      std::size_t pos = 0;
      r.value = std::stod(fields[5], &pos);
      if (pos != fields[5].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(row) + ": bad value '" + fields[5] + "'");
    }
    if (!std::isfinite(r.value))
      throw DataError(path + ":" + std::to_string(row) + ": non-finite value");
    r.label = parse_int_field(fields[6], path, row, "label");
    if (r.label < 0) throw DataError(path + ":" + std::to_string(row) + ": negative label");
    r.lineno = row;
    max_band = std::max(max_band, r.band);
    max_label = std::max(max_label, r.label);
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError(path + ": no data rows");
  const int bands = max_band + 1;
  const int channels = layout.size();

  std::map<std::tuple<int, int, int>, SampleRecord> windows;
  std::map<std::tuple<int, int, int>, std::vector<std::uint8_t>> seen;
  for (const Row& r : rows) {
    auto key = std::make_tuple(r.s, r.t, r.w);
    auto [it, inserted] = windows.try_emplace(key);
    if (inserted) {
      it->second.subject = r.s;
      it->second.trial = r.t;
      it->second.window = r.w;
      it->second.label = r.label;
      it->second.features.subject_id = r.s;
      it->second.features.trial_id = r.t;
      it->second.features.window_index = r.w;
      it->second.features.values = Tensor(Shape{channels, bands});
      seen[key].assign(static_cast<std::size_t>(channels) * bands, 0);
    } else if (it->second.label != r.label) {
      throw DataError(path + ":" + std::to_string(r.lineno) +
                      ": label disagrees within the window");
    }
    std::size_t ci = static_cast<std::size_t>(r.ch) * bands + r.band;
    if (seen[key][ci])
      throw DataError(path + ":" + std::to_string(r.lineno) + ": duplicate cell");
    seen[key][ci] = 1;
    it->second.features.values.at(r.ch, r.band) = r.value;
  }
  std::vector<SampleRecord> samples;
  for (auto& [key, rec] : windows) {
    const auto& mask = seen[key];
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i])
        throw DataError(path + ": window (subject " + std::to_string(rec.subject) + ", trial " +
                        std::to_string(rec.trial) + ", window " + std::to_string(rec.window) +
                        ") is incomplete");
    samples.push_back(std::move(rec));
  }
  if (n_bands_out) *n_bands_out = bands;
  if (n_classes_out) *n_classes_out = max_label + 1;
  return samples;
}

// ---------------------------------------------------------------------------
// manifest JSON
// ---------------------------------------------------------------------------

namespace {

std::string resolve_near(const std::string& base_file, const std::string& rel) {
  fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(base_file).parent_path() / p).string();
}

}  // namespace

void write_manifest(const std::string& path, const DatasetManifest& m) {
  ordered_json j;
  j["name"] = m.name;
  j["subjects"] = m.subjects;
  j["classes"] = m.class_labels;
  j["layout"] = m.layout_path;
  j["feature_kind"] = m.feature_kind == FeatureKind::PSD ? "PSD" : "DE";
  j["bands"] = m.n_bands;
  j["csv"] = m.csv_path;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("short write: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.subjects = j.at("subjects").get<std::vector<int>>();
    m.class_labels = j.at("classes").get<std::vector<std::string>>();
    m.layout_path = resolve_near(path, j.at("layout").get<std::string>());
    std::string kind = j.at("feature_kind").get<std::string>();
    if (kind == "PSD")
      m.feature_kind = FeatureKind::PSD;
    else if (kind == "DE")
      m.feature_kind = FeatureKind::DE;
    else
      throw DataError(path + ": feature_kind must be PSD or DE");
    m.n_bands = j.at("bands").get<int>();
    m.csv_path = resolve_near(path, j.at("csv").get<std::string>());
  } catch (const ordered_json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (m.subjects.size() < 2) throw DataError(path + ": need at least 2 subjects");
  {
    auto sorted = m.class_labels;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw DataError(path + ": class labels must be unique");
  }
  if (m.n_bands <= 0) throw DataError(path + ": bands must be positive");
  return m;
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.layout = load_layout(ds.manifest.layout_path);
  ds.samples = load_features_csv(ds.manifest.csv_path, ds.manifest, ds.layout);
  if (ds.samples.empty()) throw DataError(manifest_path + ": dataset has no samples");
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

SyntheticSpec load_synthetic_spec(const std::string& path) {
  KvFile kv = KvFile::parse_file(path);
  static const char* known[] = {"name",    "subjects",         "trials_per_subject",
                                "windows_per_trial", "classes", "bands",
                                "pattern_amplitude", "sigma_subject", "sigma_noise", "seed"};
  for (const auto& [k, v] : kv.entries) {
    bool ok = std::any_of(std::begin(known), std::end(known),
                          [&k](const char* s) { return k == s; });
    if (!ok && k.rfind("pattern_class_", 0) != 0)
      throw ConfigError(path + ": unknown key '" + k + "'");
  }
  SyntheticSpec s;
  s.name = kv.get_string("name", s.name);
  s.subjects = static_cast<int>(kv.get_long("subjects", s.subjects));
  s.trials_per_subject = static_cast<int>(kv.get_long("trials_per_subject", s.trials_per_subject));
  s.windows_per_trial = static_cast<int>(kv.get_long("windows_per_trial", s.windows_per_trial));
  s.classes = static_cast<int>(kv.get_long("classes", s.classes));
  s.bands = static_cast<int>(kv.get_long("bands", s.bands));
  s.pattern_amplitude = kv.get_double("pattern_amplitude", s.pattern_amplitude);
  s.sigma_subject = kv.get_double("sigma_subject", s.sigma_subject);
  s.sigma_noise = kv.get_double("sigma_noise", s.sigma_noise);
  s.seed = static_cast<std::uint64_t>(kv.get_long("seed", static_cast<long>(s.seed)));
  if (s.subjects < 2 || s.trials_per_subject < 1 || s.windows_per_trial < 1 || s.classes < 2 ||
      s.bands < 1)
    throw ConfigError(path + ": implausible synthetic dimensions");
  if (s.sigma_subject < 0 || s.sigma_noise < 0)
    throw ConfigError(path + ": noise scales must be >= 0");
  for (int c = 0;; ++c) {
    const std::string* v = kv.find("pattern_class_" + std::to_string(c));
    if (!v) break;
    std::istringstream ss(*v);
    std::vector<double> vals;
    double d;
    while (ss >> d) vals.push_back(d);
    if (vals.empty())
      throw ConfigError(path + ": pattern_class_" + std::to_string(c) + " is empty");
    s.explicit_patterns.push_back(Tensor(Shape{static_cast<int>(vals.size())}, vals));
  }
  if (!s.explicit_patterns.empty() &&
      static_cast<int>(s.explicit_patterns.size()) != s.classes)
    throw ConfigError(path + ": explicit patterns must cover every class");
  return s;
}

std::vector<Tensor> synthetic_patterns(const SyntheticSpec& spec, int regions) {
  std::vector<Tensor> patterns;
  if (!spec.explicit_patterns.empty()) {
    for (int c = 0; c < spec.classes; ++c) {
      const Tensor& flat = spec.explicit_patterns[static_cast<std::size_t>(c)];
      if (static_cast<int>(flat.numel()) != regions * spec.bands)
        throw ConfigError("pattern_class_" + std::to_string(c) + " needs " +
                          std::to_string(regions * spec.bands) + " values (regions x bands)");
      patterns.push_back(flat.reshaped(Shape{regions, spec.bands}));
    }
  } else {
    for (int c = 0; c < spec.classes; ++c) {
      RngStream rng(spec.seed, "pattern", static_cast<std::uint64_t>(c));
      Tensor p(Shape{regions, spec.bands});
      for (std::size_t i = 0; i < p.numel(); ++i)
        p[i] = spec.pattern_amplitude * rng.normal();
      patterns.push_back(std::move(p));
    }
  }
  for (std::size_t a = 0; a < patterns.size(); ++a)
    for (std::size_t b = a + 1; b < patterns.size(); ++b)
      if (patterns[a].vec() == patterns[b].vec())
        throw ConfigError("class patterns " + std::to_string(a) + " and " + std::to_string(b) +
                          " are identical");
  return patterns;
}

Dataset generate_synthetic(const SyntheticSpec& spec, const ElectrodeLayout& layout,
                           const std::string& layout_path) {
  Dataset ds;
  ds.layout = layout;
  ds.manifest.name = spec.name;
  for (int s = 0; s < spec.subjects; ++s) ds.manifest.subjects.push_back(s);
  for (int c = 0; c < spec.classes; ++c)
    ds.manifest.class_labels.push_back("class" + std::to_string(c));
  ds.manifest.layout_path = layout_path;
  ds.manifest.feature_kind = FeatureKind::DE;
  ds.manifest.n_bands = spec.bands;

  const int channels = layout.size();
  std::vector<Tensor> patterns = synthetic_patterns(spec, layout.region_count);

  for (int subj = 0; subj < spec.subjects; ++subj) {
    RngStream offset_rng(spec.seed, "subject-offset", static_cast<std::uint64_t>(subj));
    Tensor offset(Shape{channels, spec.bands});
    for (std::size_t i = 0; i < offset.numel(); ++i)
      offset[i] = spec.sigma_subject * offset_rng.normal();
    for (int trial = 0; trial < spec.trials_per_subject; ++trial) {
      int label = trial % spec.classes;
      const Tensor& pat = patterns[static_cast<std::size_t>(label)];
      for (int win = 0; win < spec.windows_per_trial; ++win) {
        RngStream noise(spec.seed, "noise", static_cast<std::uint64_t>(subj),
                        static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(win));
        SampleRecord rec;
        rec.subject = subj;
        rec.trial = trial;
        rec.window = win;
        rec.label = label;
        rec.features.subject_id = subj;
        rec.features.trial_id = trial;
        rec.features.window_index = win;
        rec.features.kind = FeatureKind::DE;
        rec.features.values = Tensor(Shape{channels, spec.bands});
        for (int c = 0; c < channels; ++c) {
          int region = layout.electrodes[static_cast<std::size_t>(c)].region;
          for (int b = 0; b < spec.bands; ++b)
            rec.features.values.at(c, b) =
                pat.at(region, b) + offset.at(c, b) + spec.sigma_noise * noise.normal();
        }
        ds.samples.push_back(std::move(rec));
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// model files
// ---------------------------------------------------------------------------

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  std::uint32_t crc = 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

namespace {

constexpr char kModelMagic[4] = {'E', 'E', 'G', 'M'};
constexpr std::uint32_t kModelVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 24));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_string(std::vector<unsigned char>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_f64(std::vector<unsigned char>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const unsigned char* p;
  std::size_t n;
  std::size_t pos = 0;

  void need(std::size_t k, const char* what) const {
    if (pos + k > n) throw DataError(std::string("model file truncated reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = static_cast<std::uint32_t>(p[pos]) |
                      (static_cast<std::uint32_t>(p[pos + 1]) << 8) |
                      (static_cast<std::uint32_t>(p[pos + 2]) << 16) |
                      (static_cast<std::uint32_t>(p[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(const char* what) {
    std::uint32_t len = u32(what);
    if (len > (1u << 24)) throw DataError(std::string("implausible string length in ") + what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

std::vector<unsigned char> save_model_bytes(const ModelBlocks& m) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kModelMagic, kModelMagic + 4);
  put_u32(out, kModelVersion);
  put_string(out, m.kind);
  put_string(out, m.config_echo);
  put_u32(out, static_cast<std::uint32_t>(m.blocks.size()));
  for (const auto& [name, tensor] : m.blocks) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (int i = 0; i < tensor.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(tensor.dim(i)));
    for (std::size_t i = 0; i < tensor.numel(); ++i) put_f64(out, tensor[i]);
  }
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

ModelBlocks load_model_bytes(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kModelMagic, 4) != 0)
    throw DataError("model file: bad magic");
  // checksum covers everything before the trailing CRC word
  if (bytes.size() < 12) throw DataError("model file truncated reading checksum");
  std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                         (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                         (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                         (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw DataError("model file: checksum mismatch");

  ByteReader r{bytes.data(), bytes.size() - 4, 4};
  std::uint32_t version = r.u32("version");
  if (version != kModelVersion)
    throw DataError("model file: unsupported version " + std::to_string(version));
  ModelBlocks m;
  m.kind = r.str("kind");
  m.config_echo = r.str("config echo");
  std::uint32_t n_blocks = r.u32("block count");
  if (n_blocks > (1u << 20)) throw DataError("model file: implausible block count");
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    std::string name = r.str("block name");
    std::uint32_t ndim = r.u32("block rank");
    if (ndim == 0 || ndim > 8) throw DataError("model file: implausible rank for '" + name + "'");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      std::uint32_t d = r.u32("block extent");
      if (d == 0 || d > (1u << 26)) throw DataError("model file: implausible extent");
      shape.push_back(static_cast<int>(d));
      numel *= d;
      if (numel > (1u << 28)) throw DataError("model file: implausible block size");
    }
    std::vector<double> data(numel);
    for (std::size_t k = 0; k < numel; ++k) data[k] = r.f64("block data");
    m.blocks.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != r.n) throw DataError("model file: trailing bytes after last block");
  return m;
}

void save_model_file(const std::string& path, const ModelBlocks& m) {
  auto bytes = save_model_bytes(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write: " + path);
}

ModelBlocks load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return load_model_bytes(bytes);
}

// ---------------------------------------------------------------------------
// raw EEG fixtures
// ---------------------------------------------------------------------------

namespace {
constexpr char kRawMagic[4] = {'E', 'E', 'G', 'R'};
constexpr std::uint32_t kRawVersion = 1;
}  // namespace

void write_raw_eeg(const std::string& path, const RawTrial& t) {
  if (t.samples.ndim() != 2) throw DimensionError("raw trial samples must be [channels, n]");
  if (static_cast<int>(t.channel_labels.size()) != t.samples.dim(0))
    throw DimensionError("raw trial: one label per channel required");
  std::vector<unsigned char> out;
  out.insert(out.end(), kRawMagic, kRawMagic + 4);
  put_u32(out, kRawVersion);
  put_u32(out, static_cast<std::uint32_t>(t.subject));
  put_u32(out, static_cast<std::uint32_t>(t.trial));
  put_u32(out, static_cast<std::uint32_t>(t.label));
  put_f64(out, t.fs);
  put_u32(out, static_cast<std::uint32_t>(t.samples.dim(0)));
  put_u64(out, static_cast<std::uint64_t>(t.samples.dim(1)));
  for (const std::string& lbl : t.channel_labels) {
    if (lbl.size() > 8) throw DataError("raw trial: channel label '" + lbl + "' exceeds 8 bytes");
    char buf[8] = {0};
    std::memcpy(buf, lbl.data(), lbl.size());
    out.insert(out.end(), buf, buf + 8);
  }
  for (std::size_t i = 0; i < t.samples.numel(); ++i) put_f64(out, t.samples[i]);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write: " + path);
}

RawTrial read_raw_eeg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open raw EEG file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kRawMagic, 4) != 0)
    throw DataError(path + ": not a raw EEG file (bad magic)");
  ByteReader r{bytes.data(), bytes.size(), 4};
  if (r.u32("version") != kRawVersion) throw DataError(path + ": unsupported raw version");
  RawTrial t;
  t.subject = static_cast<int>(r.u32("subject"));
  t.trial = static_cast<int>(r.u32("trial"));
  t.label = static_cast<int>(r.u32("label"));
  t.fs = r.f64("sampling rate");
  if (!(t.fs > 0.0) || !std::isfinite(t.fs)) throw DataError(path + ": bad sampling rate");
  std::uint32_t channels = r.u32("channel count");
  std::uint64_t samples = r.u64("sample count");
  if (channels == 0 || channels > 4096) throw DataError(path + ": implausible channel count");
  if (samples < 2 || samples > (1ull << 28)) throw DataError(path + ": implausible sample count");
  for (std::uint32_t c = 0; c < channels; ++c) {
    r.need(8, "channel label");
    std::size_t len = 0;
    while (len < 8 && r.p[r.pos + len] != 0) ++len;
    t.channel_labels.emplace_back(reinterpret_cast<const char*>(r.p + r.pos), len);
    r.pos += 8;
  }
  Tensor data(Shape{static_cast<int>(channels), static_cast<int>(samples)});
  for (std::size_t i = 0; i < data.numel(); ++i) {
    data[i] = r.f64("sample data");
    if (!std::isfinite(data[i])) throw DataError(path + ": non-finite sample");
  }
  if (r.pos != r.n) throw DataError(path + ": trailing bytes");
  t.samples = std::move(data);
  return t;
}

}  // namespace eegdual
