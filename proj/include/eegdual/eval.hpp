#ifndef EEGDUAL_EVAL_HPP
#define EEGDUAL_EVAL_HPP

#include <string>
#include <vector>

#include "eegdual/data_io.hpp"
#include "eegdual/training.hpp"

namespace eegdual {

// One leave-one-subject-out fold: train on every subject except one, test on
// that one. A seeded stratified validation split is carved from the training
// subjects' windows.
struct Fold {
  int test_subject = 0;
  std::vector<int> train_subjects;
  SplitIndices split;                   // train/val over the training subjects
  std::vector<std::size_t> test_indices;
};

std::vector<Fold> loso_folds(const Dataset& ds, std::uint64_t seed, double val_fraction = 0.1);

struct FoldResult {
  int subject = 0;
  double accuracy = 0.0;
  Tensor confusion;  // [C, C]: rows = true class, columns = predicted
};

// Scores predictions against truth; counts land in the confusion matrix.
FoldResult score_predictions(const std::vector<int>& truth, const std::vector<int>& predicted,
                             int classes, int subject);

// Window-level evaluation of a frozen model on a fold's test samples; with
// cfg.majority_vote the per-trial majority prediction is scored instead.
FoldResult evaluate_fold(Ensemble& model, const Dataset& ds, const Fold& fold,
                         const TrainConfig& cfg, FoldData& fold_data);

struct Report {
  std::string dataset;
  std::string config_hash;
  std::vector<std::string> class_labels;
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double stddev = 0.0;   // population convention
  std::string unit = "window";
};

Report aggregate(const std::vector<FoldResult>& folds, const Dataset& ds,
                 const std::string& config_hash, const std::string& unit);
std::string report_json(const Report& r);

// Full LOSO pipeline: per fold, derive the fold seed from the master seed and
// the held-out subject, standardize on the training folds, train, evaluate.
// parallel_folds > 1 runs folds on that many threads; the report is
// byte-identical to a serial run.
Report run_loso(const Dataset& ds, const TrainConfig& cfg, const std::string& config_hash,
                int parallel_folds = 1);

std::uint64_t fold_seed(std::uint64_t master_seed, int subject);

}  // namespace eegdual

#endif
