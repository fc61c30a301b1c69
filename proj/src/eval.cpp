#include "eegdual/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

#include "json.hpp"

#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

using ordered_json = nlohmann::ordered_json;

std::uint64_t fold_seed(std::uint64_t master_seed, int subject) {
  std::uint64_t h = fnv1a("fold");
  h = fnv1a(&master_seed, sizeof master_seed, h);
  std::uint64_t s = static_cast<std::uint64_t>(subject);
  return fnv1a(&s, sizeof s, h);
}

std::vector<Fold> loso_folds(const Dataset& ds, std::uint64_t seed, double val_fraction) {
  if (ds.manifest.subjects.size() < 2)
    throw ConfigError("leave-one-subject-out needs at least 2 subjects");
  if (!(val_fraction > 0.0 && val_fraction < 0.5))
    throw ConfigError("val_fraction must lie in (0, 0.5)");

  std::vector<Fold> folds;
  for (int held : ds.manifest.subjects) {
    Fold fold;
    fold.test_subject = held;
    for (int s : ds.manifest.subjects)
      if (s != held) fold.train_subjects.push_back(s);

    // class-keyed pools over training-subject windows for the stratified split
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const SampleRecord& rec = ds.samples[i];
      if (rec.subject == held)
        fold.test_indices.push_back(i);
      else
        by_class[rec.label].push_back(i);
    }
    RngStream rng(seed, "valsplit", static_cast<std::uint64_t>(held));
    for (auto& [label, pool] : by_class) {
      rng.shuffle(pool);
      std::size_t n_val = std::max<std::size_t>(
          1, static_cast<std::size_t>(
                 std::lround(val_fraction * static_cast<double>(pool.size()))));
      for (std::size_t k = 0; k < pool.size(); ++k)
        (k < n_val ? fold.split.val : fold.split.train).push_back(pool[k]);
    }
    std::sort(fold.split.train.begin(), fold.split.train.end());
    std::sort(fold.split.val.begin(), fold.split.val.end());
    folds.push_back(std::move(fold));
  }
  return folds;
}

FoldResult score_predictions(const std::vector<int>& truth, const std::vector<int>& predicted,
                             int classes, int subject) {
  if (truth.empty()) throw DataError("score_predictions: empty test fold");
  if (truth.size() != predicted.size())
    throw DimensionError("score_predictions: prediction count mismatch");
  FoldResult r;
  r.subject = subject;
  r.confusion = Tensor(Shape{classes, classes});
  long correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes)
      throw DataError("score_predictions: class index out of range");
    r.confusion.at(truth[i], predicted[i]) += 1.0;
    if (truth[i] == predicted[i]) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  return r;
}

FoldResult evaluate_fold(Ensemble& model, const Dataset& ds, const Fold& fold,
                         const TrainConfig& cfg, FoldData& fold_data) {
  if (fold.test_indices.empty()) throw DataError("evaluate_fold: empty test fold");
  std::vector<int> predicted = predict(model, fold.test_indices, cfg, fold_data);
  std::vector<int> truth;
  truth.reserve(fold.test_indices.size());
  for (std::size_t i : fold.test_indices) truth.push_back(ds.samples[i].label);

  if (!cfg.majority_vote)
    return score_predictions(truth, predicted, ds.n_classes(), fold.test_subject);

  // trial-level: majority over window predictions, ties to the lowest class
  std::map<int, std::vector<std::size_t>> trials;
  for (std::size_t k = 0; k < fold.test_indices.size(); ++k)
    trials[ds.samples[fold.test_indices[k]].trial].push_back(k);
  std::vector<int> trial_truth, trial_pred;
  for (const auto& [trial, members] : trials) {
    std::vector<int> votes(static_cast<std::size_t>(ds.n_classes()), 0);
    for (std::size_t k : members) votes[static_cast<std::size_t>(predicted[k])]++;
    int best = 0;
    for (int c = 1; c < ds.n_classes(); ++c)
      if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
    trial_pred.push_back(best);
    trial_truth.push_back(truth[members[0]]);
  }
  return score_predictions(trial_truth, trial_pred, ds.n_classes(), fold.test_subject);
}

Report aggregate(const std::vector<FoldResult>& folds, const Dataset& ds,
                 const std::string& config_hash, const std::string& unit) {
  if (folds.empty()) throw UsageError("aggregate: no fold results");
  Report r;
  r.dataset = ds.manifest.name;
  r.config_hash = config_hash;
  r.class_labels = ds.manifest.class_labels;
  r.folds = folds;
  r.unit = unit;
  bool all_equal = true;
  for (const FoldResult& f : folds) all_equal = all_equal && f.accuracy == folds[0].accuracy;
  if (all_equal) {  // keep the mean exact and the deviation at a true zero
    r.mean = folds[0].accuracy;
    r.stddev = 0.0;
    return r;
  }
  double sum = 0.0;
  for (const FoldResult& f : folds) sum += f.accuracy;
  r.mean = sum / static_cast<double>(folds.size());
  double ssq = 0.0;
  for (const FoldResult& f : folds) ssq += (f.accuracy - r.mean) * (f.accuracy - r.mean);
  r.stddev = std::sqrt(ssq / static_cast<double>(folds.size()));  // population convention
  return r;
}

std::string report_json(const Report& r) {
  ordered_json j;
  j["dataset"] = r.dataset;
  j["config_hash"] = r.config_hash;
  j["classes"] = r.class_labels;
  ordered_json folds = ordered_json::array();
  for (const FoldResult& f : r.folds) {
    ordered_json jf;
    jf["subject"] = f.subject;
    jf["accuracy"] = f.accuracy;
    ordered_json confusion = ordered_json::array();
    for (int a = 0; a < f.confusion.dim(0); ++a) {
      ordered_json row = ordered_json::array();
      for (int b = 0; b < f.confusion.dim(1); ++b)
        row.push_back(static_cast<long>(f.confusion.at(a, b)));
      confusion.push_back(std::move(row));
    }
    jf["confusion"] = std::move(confusion);
    folds.push_back(std::move(jf));
  }
  j["folds"] = std::move(folds);
  j["mean"] = r.mean;
  j["std"] = r.stddev;
  j["convention"] = "population";
  j["unit"] = r.unit;
  return j.dump(2) + "\n";
}

Report run_loso(const Dataset& ds, const TrainConfig& cfg, const std::string& config_hash,
                int parallel_folds) {
  std::vector<Fold> folds = loso_folds(ds, cfg.seed, cfg.val_fraction);
  std::vector<FoldResult> results(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());

  auto run_fold = [&](std::size_t fi) {
    try {
      const Fold& fold = folds[fi];
      TrainConfig fold_cfg = cfg;
      fold_cfg.seed = fold_seed(cfg.seed, fold.test_subject);
      // standardization statistics come from this fold's training windows only
      FoldData fd = prepare_fold_data(ds, fold.split.train, fold_cfg);
      auto model = build_ensemble(ds, fold_cfg);
      if (fold_cfg.domain_adversarial) {
        DatasetView heldout;
        heldout.ds = &ds;
        heldout.indices = fold.test_indices;
        train_domain_adversarial(*model, ds, fold.split, heldout, fold_cfg, fd);
      } else if (fold_cfg.fusion == FusionMode::Saliency) {
        train_saliency_fusion(*model, ds, fold.split, fold_cfg, fd);
      } else {
        train_classifier(*model, ds, fold.split, fold_cfg, fd);
      }
      results[fi] = evaluate_fold(*model, ds, fold, fold_cfg, fd);
    } catch (...) {
      errors[fi] = std::current_exception();
    }
  };

  int threads = std::max(1, parallel_folds);
  if (threads <= 1) {
    for (std::size_t fi = 0; fi < folds.size(); ++fi) run_fold(fi);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t]() {
        for (std::size_t fi = static_cast<std::size_t>(t); fi < folds.size();
             fi += static_cast<std::size_t>(threads))
          run_fold(fi);
      });
    for (std::thread& th : pool) th.join();
  }
  for (std::size_t fi = 0; fi < folds.size(); ++fi)
    if (errors[fi]) std::rethrow_exception(errors[fi]);

  return aggregate(results, ds, config_hash, cfg.majority_vote ? "trial" : "window");
}

}  // namespace eegdual
