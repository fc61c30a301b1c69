#ifndef EEGDUAL_TRAINING_HPP
#define EEGDUAL_TRAINING_HPP

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eegdual/adam.hpp"
#include "eegdual/config.hpp"
#include "eegdual/data_io.hpp"
#include "eegdual/models.hpp"

namespace eegdual {

enum class FusionMode { None, Output, Feature, Saliency };
enum class BranchKind { Hrnn, Cnn, Capsule };

std::string fusion_name(FusionMode m);
std::string branch_name(BranchKind b);
FusionMode parse_fusion(const std::string& s);
BranchKind parse_branch(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-8;
  int max_epochs = 150;
  int patience = 5;
  double min_delta = 1e-4;
  int batch_size = 64;
  std::uint64_t seed = 0;
  FusionMode fusion = FusionMode::None;
  BranchKind branch = BranchKind::Hrnn;  // used when fusion == None
  bool domain_adversarial = false;
  bool lambda_constant = false;          // otherwise lambda follows the epoch schedule
  double lambda_value = 1.0;
  double aux_hrnn = 0.5;                 // weight of the H-RNN loss term in fusion training
  double aux_cnn = 0.5;
  int image_size = 32;
  double alpha = 0.5;                    // output-fusion mix
  int hidden = 32;
  double val_fraction = 0.1;
  bool majority_vote = false;            // trial-level accuracy instead of window-level
  bool force_uniform_saliency = false;   // test hook: zero saliency -> uniform fallback

  static const std::vector<std::string>& known_keys();
  static TrainConfig from_kv(const KvFile& kv);
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  ModelConfig model_config(const Dataset& ds) const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double domain_acc = -1.0;  // < 0 when domain training is off
};

// True iff the best validation loss has not improved by at least min_delta
// during the last `patience` consecutive epochs.
bool early_stop_check(const std::vector<EpochStats>& history, int patience, double min_delta);

// lambda(p) = 2/(1+exp(-10 p)) - 1 with p = epoch/max_epochs.
double lambda_schedule(int epoch, int max_epochs);

struct SplitIndices {
  std::vector<std::size_t> train;  // training windows, validation excluded
  std::vector<std::size_t> val;
};

// Per-feature z-score fitted on training-fold windows only. apply() calls
// are counted so tests can pin down which fold's statistics touched a sample.
class Standardizer {
public:
  void fit(const Dataset& ds, const std::vector<std::size_t>& indices);
  Tensor apply(const Tensor& values) const;
  bool fitted() const { return fitted_; }
  const Tensor& mean() const { return mean_; }
  const Tensor& stddev() const { return std_; }
  long apply_calls() const { return apply_calls_; }

private:
  Tensor mean_, std_;
  bool fitted_ = false;
  mutable long apply_calls_ = 0;
};

// Standardized features (and rasterized images when an image branch is in
// play) for every sample of the dataset, prepared once per fold.
struct FoldData {
  const Dataset* ds = nullptr;
  Standardizer stdz;
  std::shared_ptr<const RasterGrid> grid;
  std::vector<Tensor> features;  // [channels, bands] per sample
  std::vector<Tensor> images;    // [bands, h, w] per sample; empty when unused
  bool has_images = false;
};

FoldData prepare_fold_data(const Dataset& ds, const std::vector<std::size_t>& fit_indices,
                           const TrainConfig& cfg);

// The trainable bundle behind one training run.
struct Ensemble {
  ModelConfig cfg;
  FusionMode fusion = FusionMode::None;
  BranchKind branch = BranchKind::Hrnn;
  ParamStore store;
  std::unique_ptr<HrnnModel> hrnn;
  std::unique_ptr<CnnModel> cnn;
  std::unique_ptr<CapsModel> caps;
  std::unique_ptr<FusionHead> fhead;
  std::unique_ptr<DomainHead> dhead;

  std::string kind_tag() const;
  bool needs_images() const;
  bool needs_features() const;
};

std::unique_ptr<Ensemble> build_ensemble(const Dataset& ds, const TrainConfig& cfg);

// Serialization round trip through the model-file block format.
ModelBlocks ensemble_blocks(const Ensemble& e, const std::string& config_echo);
std::unique_ptr<Ensemble> ensemble_from_blocks(const ModelBlocks& blocks, const Dataset& ds);

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
};

// Adam over seeded shuffled mini-batches with early stopping; restores the
// parameters of the best-validation-loss epoch before returning. Throws
// NumericalError on a non-finite loss.
TrainResult train_classifier(Ensemble& model, const Dataset& ds, const SplitIndices& split,
                             const TrainConfig& cfg, FoldData& fold);

// Joint training of both branches plus the fusion head; per batch the H-RNN
// saliency (stop-gradient) is rasterized and multiplied into the CNN input.
TrainResult train_saliency_fusion(Ensemble& model, const Dataset& ds,
                                  const SplitIndices& split, const TrainConfig& cfg,
                                  FoldData& fold);

// Adds the domain step: mixed train/held-out batches pass through the
// gradient-reversal domain head; held-out emotion labels are never read.
TrainResult train_domain_adversarial(Ensemble& model, const Dataset& ds,
                                     const SplitIndices& split, const DatasetView& heldout,
                                     const TrainConfig& cfg, FoldData& fold);

// Eval-mode class predictions for the given samples.
std::vector<int> predict(Ensemble& model, const std::vector<std::size_t>& indices,
                         const TrainConfig& cfg, FoldData& fold);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::vector<std::string>& header_comments);

// Accuracy-maximizing output-fusion weight over a uniform grid of `steps`
// values in [0, 1] (ties resolve to the smaller alpha).
double best_output_alpha(const Tensor& logits_a, const Tensor& logits_b,
                         const std::vector<int>& labels, int steps = 21);

}  // namespace eegdual

#endif
