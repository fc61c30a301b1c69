#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "eegdual/config.hpp"
#include "eegdual/data_io.hpp"
#include "eegdual/errors.hpp"
#include "eegdual/eval.hpp"
#include "eegdual/gradcheck.hpp"
#include "eegdual/rng.hpp"
#include "eegdual/signal.hpp"
#include "eegdual/tape.hpp"
#include "eegdual/topomap.hpp"
#include "eegdual/training.hpp"

namespace fs = std::filesystem;
using namespace eegdual;

namespace {

struct TrainFlags {
  std::string dataset;
  std::string model = "hrnn";
  bool model_given = false;
  std::string fusion = "none";
  bool domain_adv = false;
  std::string config_path;
  long seed = -1;
  bool seed_given = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--dataset", dataset, "dataset manifest JSON")->required();
    cmd->add_option("--model", model, "hrnn|cnn|capsule (single-branch training)");
    cmd->add_option("--fusion", fusion, "none|output|feature|saliency");
    cmd->add_flag("--domain-adv", domain_adv, "enable the domain-adversarial step");
    cmd->add_option("--config", config_path, "key = value training config file");
    cmd->add_option("--seed", seed, "master seed (overrides the config file)");
  }

  // Effective config: defaults <- file <- flags.
  TrainConfig resolve(const CLI::App* cmd) {
    model_given = cmd->count("--model") > 0;
    seed_given = cmd->count("--seed") > 0;
    KvFile kv;
    if (!config_path.empty()) kv = KvFile::parse_file(config_path);
    if (cmd->count("--fusion")) kv.set("fusion", fusion);
    if (model_given) kv.set("model", model);
    if (cmd->count("--domain-adv")) kv.set("domain_adversarial", "1");
    if (seed_given) kv.set("seed", std::to_string(seed));
    TrainConfig cfg = TrainConfig::from_kv(kv);
    if (cfg.fusion != FusionMode::None && model_given)
      throw UsageError("--model selects a single branch; fusion modes always train the "
                       "hrnn+cnn pair. Drop --model or use --fusion none.");
    return cfg;
  }
};

std::string effective_config_text(const TrainConfig& cfg) {
  return canonical_text(cfg.to_kv());
}

std::vector<std::string> provenance_lines(const std::string& config_hash, std::uint64_t seed) {
  return {"tool_version = " + std::string(kToolVersion), "config_hash = " + config_hash,
          "seed = " + std::to_string(seed)};
}

int cmd_synth(const std::string& spec_path, const std::string& layout_path,
              const std::string& out_dir, long seed, bool seed_given) {
  SyntheticSpec spec = load_synthetic_spec(spec_path);
  if (seed_given) spec.seed = static_cast<std::uint64_t>(seed);
  ElectrodeLayout layout = load_layout(layout_path);
  std::string abs_layout = fs::absolute(layout_path).string();
  Dataset ds = generate_synthetic(spec, layout, abs_layout);
  fs::create_directories(out_dir);
  ds.manifest.csv_path = "features.csv";
  write_features_csv((fs::path(out_dir) / "features.csv").string(), ds);

  // provenance: spec hash + seed + tool version inside the manifest name field
  // stays intrusive; keep it in a sibling meta entry instead
  KvFile spec_kv = KvFile::parse_file(spec_path);
  spec_kv.set("seed", std::to_string(spec.seed));
  std::string hash = config_hash_hex(canonical_text(spec_kv.entries));
  write_manifest((fs::path(out_dir) / "manifest.json").string(), ds.manifest);
  std::ofstream meta((fs::path(out_dir) / "provenance.txt").string());
  for (const std::string& line : provenance_lines(hash, spec.seed)) meta << line << "\n";
  std::printf("wrote %s (%zu samples, %d subjects, %d classes)\n",
              (fs::path(out_dir) / "manifest.json").c_str(), ds.samples.size(),
              static_cast<int>(ds.manifest.subjects.size()), ds.n_classes());
  return 0;
}

std::string options_hash(std::vector<std::pair<std::string, std::string>> kv) {
  return config_hash_hex(canonical_text(kv));
}

void write_provenance(const std::string& path, const std::string& hash,
                      const std::string& seed_note) {
  std::ofstream out(path);
  out << "tool_version = " << kToolVersion << "\nconfig_hash = " << hash << "\n"
      << seed_note;
}

int cmd_features(const std::string& raw_dir, const std::string& method,
                 const std::string& bands_path, double win, double hop,
                 const std::string& out_csv) {
  if (method != "psd" && method != "de")
    throw UsageError("--method must be psd or de");
  std::vector<BandSpec> bands =
      bands_path.empty() ? default_bands() : load_bands(bands_path);

  std::vector<fs::path> files;
  if (!fs::is_directory(raw_dir)) throw DataError("--raw is not a directory: " + raw_dir);
  for (const auto& entry : fs::directory_iterator(raw_dir))
    if (entry.path().extension() == ".eegraw") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .eegraw files under " + raw_dir);

  std::ofstream out(out_csv);
  if (!out) throw DataError("cannot write " + out_csv);
  out << "subject,trial,window,channel,band,value,label\n";
  for (const fs::path& f : files) {
    RawTrial trial = read_raw_eeg(f.string());
    auto windows = sliding_windows(trial.samples, trial.fs, win, hop, trial.subject, trial.trial);
    for (const RawWindow& w : windows) {
      FeatureArray fa =
          method == "psd" ? band_power_psd(w, bands) : differential_entropy(w, bands);
      for (int c = 0; c < fa.values.dim(0); ++c)
        for (int b = 0; b < fa.values.dim(1); ++b)
          out << trial.subject << ',' << trial.trial << ',' << w.window_index << ','
              << trial.channel_labels[static_cast<std::size_t>(c)] << ',' << b << ','
              << format_double(fa.values.at(c, b)) << ',' << trial.label << '\n';
    }
  }
  if (!out) throw DataError("short write: " + out_csv);
  write_provenance(out_csv + ".provenance.txt",
                   options_hash({{"method", method},
                                 {"bands", bands_path.empty() ? "default" : bands_path},
                                 {"win", format_double(win)},
                                 {"hop", format_double(hop)}}),
                   "");
  std::printf("wrote %s from %zu raw trials\n", out_csv.c_str(), files.size());
  return 0;
}

int cmd_topomap(const std::string& features_csv, const std::string& layout_path, int size,
                const std::string& out_dir) {
  ElectrodeLayout layout = load_layout(layout_path);
  int n_bands = 0, n_classes = 0;
  auto samples = load_features_csv_loose(features_csv, layout, &n_bands, &n_classes);
  auto grid = build_raster_grid(azimuthal_project(layout, size, size));
  fs::create_directories(out_dir);

  std::ofstream index((fs::path(out_dir) / "index.txt").string());
  index << "# tool_version = " << kToolVersion << "\n# source = " << features_csv
        << "\n# size = " << size << "\n# config_hash = "
        << options_hash({{"features", features_csv}, {"layout", layout_path},
                         {"size", std::to_string(size)}})
        << "\n";
  for (const SampleRecord& s : samples) {
    TopoImage img = rasterize(s.features, grid);
    char stem[64];
    std::snprintf(stem, sizeof stem, "s%d_t%d_w%d", s.subject, s.trial, s.window);
    fs::path base = fs::path(out_dir) / stem;
    write_raster(base.string() + ".raster", img.raster);
    for (int b = 0; b < img.bands(); ++b)
      write_pgm16(base.string() + ".band" + std::to_string(b) + ".pgm", img.raster, b,
                  base.string() + ".band" + std::to_string(b) + ".scale.txt");
    index << stem << ".raster label " << s.label << "\n";
  }
  std::printf("wrote %zu rasters (%d bands, %dx%d) under %s\n", samples.size(), n_bands, size,
              size, out_dir.c_str());
  return 0;
}

SplitIndices whole_dataset_split(const Dataset& ds, const TrainConfig& cfg) {
  // stratified validation split over all subjects, mirroring the per-fold rule
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    by_class[ds.samples[i].label].push_back(i);
  RngStream rng(cfg.seed, "valsplit-all");
  SplitIndices split;
  for (auto& [label, pool] : by_class) {
    rng.shuffle(pool);
    std::size_t n_val = std::max<std::size_t>(
        1,
        static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(pool.size()))));
    for (std::size_t k = 0; k < pool.size(); ++k)
      (k < n_val ? split.val : split.train).push_back(pool[k]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

int cmd_train(TrainFlags& flags, const CLI::App* cmd, const std::string& out_model,
              std::string history_path, const std::string& dump_saliency) {
  TrainConfig cfg = flags.resolve(cmd);
  Dataset ds = load_dataset(flags.dataset);
  SplitIndices split = whole_dataset_split(ds, cfg);
  FoldData fold = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  if (!dump_saliency.empty() && cfg.fusion == FusionMode::None &&
      cfg.branch != BranchKind::Hrnn)
    throw UsageError("--dump-saliency needs the hrnn branch in the trained model");

  TrainResult result;
  if (cfg.domain_adversarial) {
    // the paper's domain step run outside LOSO treats the validation windows
    // as the second, label-hidden domain
    DatasetView heldout;
    heldout.ds = &ds;
    heldout.indices = split.val;
    result = train_domain_adversarial(*model, ds, split, heldout, cfg, fold);
  } else if (cfg.fusion == FusionMode::Saliency) {
    result = train_saliency_fusion(*model, ds, split, cfg, fold);
  } else {
    result = train_classifier(*model, ds, split, cfg, fold);
  }

  std::string echo = effective_config_text(cfg);
  std::string hash = config_hash_hex(echo);
  std::string full_echo = echo + "meta.dataset = " + ds.manifest.name +
                          "\nmeta.config_hash = " + hash +
                          "\nmeta.tool_version = " + kToolVersion + "\n";
  save_model_file(out_model, ensemble_blocks(*model, full_echo));
  if (history_path.empty()) history_path = out_model + ".history.csv";
  auto comments = provenance_lines(hash, cfg.seed);
  comments.push_back("dataset = " + ds.manifest.name);
  comments.push_back("kind = " + model->kind_tag());
  write_history_csv(history_path, result.history, comments);

  if (!dump_saliency.empty()) {
    // trained-model saliency of a few validation windows, in the raster format
    fs::create_directories(dump_saliency);
    auto grid = fold.grid ? fold.grid
                          : build_raster_grid(
                                azimuthal_project(ds.layout, cfg.image_size, cfg.image_size));
    std::size_t n = std::min<std::size_t>(8, split.val.size());
    Tensor feats(Shape{static_cast<int>(n), ds.channels(), ds.bands()});
    std::size_t stride = static_cast<std::size_t>(ds.channels()) * ds.bands();
    for (std::size_t k = 0; k < n; ++k)
      std::copy(fold.features[split.val[k]].data(),
                fold.features[split.val[k]].data() + stride, feats.data() + k * stride);
    Tensor sal = input_saliency(
        [&model](Tape& t, Var x) {
          Bind bind(t, model->store, false);
          return model->hrnn->forward(t, bind, x).logits;
        },
        feats);
    for (std::size_t k = 0; k < n; ++k) {
      Tensor sal_k(Shape{ds.channels(), ds.bands()},
                   std::vector<double>(sal.data() + k * stride, sal.data() + (k + 1) * stride));
      TopoImage img = saliency_to_image(sal_k, grid);
      fs::path base = fs::path(dump_saliency) / ("val" + std::to_string(k));
      write_raster(base.string() + ".saliency.raster", img.raster);
      for (int b = 0; b < img.bands(); ++b)
        write_pgm16(base.string() + ".band" + std::to_string(b) + ".pgm", img.raster, b,
                    base.string() + ".band" + std::to_string(b) + ".scale.txt");
    }
    write_provenance((fs::path(dump_saliency) / "provenance.txt").string(), hash,
                     "seed = " + std::to_string(cfg.seed) + "\n");
  }
  std::printf("trained %s: best epoch %d, %zu epochs run; model -> %s\n",
              model->kind_tag().c_str(), result.best_epoch, result.history.size(),
              out_model.c_str());
  return 0;
}

int cmd_eval_loso(TrainFlags& flags, const CLI::App* cmd, const std::string& report_path,
                  int parallel_folds) {
  TrainConfig cfg = flags.resolve(cmd);
  Dataset ds = load_dataset(flags.dataset);
  std::string hash = config_hash_hex(effective_config_text(cfg));
  if (parallel_folds < 1) {
    const char* env = std::getenv("EEGDUAL_THREADS");
    parallel_folds = env ? std::max(1, std::atoi(env)) : 1;
  }
  Report report = run_loso(ds, cfg, hash, parallel_folds);
  std::ofstream out(report_path);
  if (!out) throw DataError("cannot write " + report_path);
  out << report_json(report);
  if (!out) throw DataError("short write: " + report_path);
  std::printf("LOSO %s: mean %.4f, std %.4f over %zu folds -> %s\n",
              ds.manifest.name.c_str(), report.mean, report.stddev, report.folds.size(),
              report_path.c_str());
  return 0;
}

int cmd_gradcheck(bool inject_fault) {
  set_backward_fault_injection(inject_fault);
  auto results = run_gradcheck_battery(1e-4);
  set_backward_fault_injection(false);
  bool all_pass = true;
  for (const GradCheckEntry& e : results) {
    std::printf("%-24s %12.3e  %s\n", e.name.c_str(), e.max_rel_err, e.pass ? "PASS" : "FAIL");
    all_pass = all_pass && e.pass;
  }
  std::printf("%zu ops checked, %s\n", results.size(),
              all_pass ? "all passed" : "failures detected");
  if (!all_pass) throw NumericalError("gradient battery failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-branch EEG emotion estimation pipeline"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_spec, synth_layout, synth_out;
  long synth_seed = -1;
  synth->add_option("--spec", synth_spec, "synthetic spec (key = value)")->required();
  synth->add_option("--layout", synth_layout, "electrode layout file")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override the spec seed");

  auto* features = app.add_subcommand("features", "extract PSD/DE features from raw windows");
  std::string feat_raw, feat_method = "de", feat_bands, feat_out;
  double feat_win = 1.0, feat_hop = 1.0;
  features->add_option("--raw", feat_raw, "directory of .eegraw trials")->required();
  features->add_option("--method", feat_method, "psd|de");
  features->add_option("--bands", feat_bands, "band file (default: canonical five)");
  features->add_option("--win", feat_win, "window length in seconds");
  features->add_option("--hop", feat_hop, "hop in seconds");
  features->add_option("--out", feat_out, "output feature CSV")->required();

  auto* topomap = app.add_subcommand("topomap", "rasterize feature windows into head images");
  std::string topo_features, topo_layout, topo_out;
  int topo_size = 32;
  topomap->add_option("--features", topo_features, "feature CSV")->required();
  topomap->add_option("--layout", topo_layout, "electrode layout file")->required();
  topomap->add_option("--size", topo_size, "image height/width");
  topomap->add_option("--out", topo_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a branch or a fused model");
  TrainFlags train_flags;
  std::string train_out, train_history, train_saliency_dump;
  train_flags.attach(train);
  train->add_option("--out", train_out, "output model file")->required();
  train->add_option("--history", train_history, "history CSV path");
  train->add_option("--dump-saliency", train_saliency_dump,
                    "directory for trained-model saliency rasters of validation windows");

  auto* eval_loso = app.add_subcommand("eval-loso", "leave-one-subject-out cross-validation");
  TrainFlags eval_flags;
  std::string report_path = "report.json";
  int parallel_folds = 0;
  eval_flags.attach(eval_loso);
  eval_loso->add_option("--report", report_path, "output report JSON");
  eval_loso->add_option("--parallel-folds", parallel_folds,
                        "fold thread count (0 = EEGDUAL_THREADS or serial)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference battery over every op");
  bool inject_fault = false;
  gradcheck->add_flag("--inject-fault", inject_fault,
                      "corrupt one backward rule; the battery must then fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_spec, synth_layout, synth_out, synth_seed,
                       synth->count("--seed") > 0);
    if (features->parsed())
      return cmd_features(feat_raw, feat_method, feat_bands, feat_win, feat_hop, feat_out);
    if (topomap->parsed()) return cmd_topomap(topo_features, topo_layout, topo_size, topo_out);
    if (train->parsed())
      return cmd_train(train_flags, train, train_out, train_history, train_saliency_dump);
    if (eval_loso->parsed())
      return cmd_eval_loso(eval_flags, eval_loso, report_path, parallel_folds);
    if (gradcheck->parsed()) return cmd_gradcheck(inject_fault);
    std::fprintf(stderr, "usage error: no subcommand\n");
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
}
