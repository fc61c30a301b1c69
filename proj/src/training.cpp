#include "eegdual/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

std::string fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::None: return "none";
    case FusionMode::Output: return "output";
    case FusionMode::Feature: return "feature";
    default: return "saliency";
  }
}

std::string branch_name(BranchKind b) {
  switch (b) {
    case BranchKind::Hrnn: return "hrnn";
    case BranchKind::Cnn: return "cnn";
    default: return "capsule";
  }
}

FusionMode parse_fusion(const std::string& s) {
  if (s == "none") return FusionMode::None;
  if (s == "output") return FusionMode::Output;
  if (s == "feature") return FusionMode::Feature;
  if (s == "saliency") return FusionMode::Saliency;
  throw ConfigError("unknown fusion mode '" + s + "' (none|output|feature|saliency)");
}

BranchKind parse_branch(const std::string& s) {
  if (s == "hrnn") return BranchKind::Hrnn;
  if (s == "cnn") return BranchKind::Cnn;
  if (s == "capsule") return BranchKind::Capsule;
  throw ConfigError("unknown model '" + s + "' (hrnn|cnn|capsule)");
}

const std::vector<std::string>& TrainConfig::known_keys() {
  static const std::vector<std::string> keys = {
      "lr", "weight_decay", "max_epochs", "patience", "min_delta", "batch_size",
      "seed", "fusion", "model", "domain_adversarial", "lambda_mode", "lambda_value",
      "aux_hrnn", "aux_cnn", "image_size", "alpha", "hidden", "val_fraction",
      "majority_vote", "force_uniform_saliency"};
  return keys;
}

TrainConfig TrainConfig::from_kv(const KvFile& kv) {
  for (const auto& [k, v] : kv.entries) {
    if (k.rfind("meta.", 0) == 0) continue;  // provenance entries in config echoes
    const auto& keys = known_keys();
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("unknown config key '" + k + "'");
  }
  TrainConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.max_epochs = static_cast<int>(kv.get_long("max_epochs", c.max_epochs));
  c.patience = static_cast<int>(kv.get_long("patience", c.patience));
  c.min_delta = kv.get_double("min_delta", c.min_delta);
  c.batch_size = static_cast<int>(kv.get_long("batch_size", c.batch_size));
  c.seed = static_cast<std::uint64_t>(kv.get_long("seed", static_cast<long>(c.seed)));
  c.fusion = parse_fusion(kv.get_string("fusion", fusion_name(c.fusion)));
  c.branch = parse_branch(kv.get_string("model", branch_name(c.branch)));
  c.domain_adversarial = kv.get_long("domain_adversarial", c.domain_adversarial ? 1 : 0) != 0;
  std::string lm = kv.get_string("lambda_mode", c.lambda_constant ? "constant" : "schedule");
  if (lm != "constant" && lm != "schedule")
    throw ConfigError("lambda_mode must be schedule or constant");
  c.lambda_constant = lm == "constant";
  c.lambda_value = kv.get_double("lambda_value", c.lambda_value);
  c.aux_hrnn = kv.get_double("aux_hrnn", c.aux_hrnn);
  c.aux_cnn = kv.get_double("aux_cnn", c.aux_cnn);
  c.image_size = static_cast<int>(kv.get_long("image_size", c.image_size));
  c.alpha = kv.get_double("alpha", c.alpha);
  c.hidden = static_cast<int>(kv.get_long("hidden", c.hidden));
  c.val_fraction = kv.get_double("val_fraction", c.val_fraction);
  c.majority_vote = kv.get_long("majority_vote", c.majority_vote ? 1 : 0) != 0;
  c.force_uniform_saliency =
      kv.get_long("force_uniform_saliency", c.force_uniform_saliency ? 1 : 0) != 0;

  if (!(c.lr > 0)) throw ConfigError("lr must be positive");
  if (c.patience < 1) throw ConfigError("patience must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 0.5))
    throw ConfigError("val_fraction must lie in (0, 0.5)");
  if (c.lambda_value < 0.0) throw ConfigError("lambda_value must be >= 0");
  if (c.image_size < 8 || c.image_size % 8 != 0)
    throw ConfigError("image_size must be a positive multiple of 8");
  if (c.hidden < 1) throw ConfigError("hidden must be >= 1");
  return c;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("lr", format_double(lr));
  kv.emplace_back("weight_decay", format_double(weight_decay));
  kv.emplace_back("max_epochs", std::to_string(max_epochs));
  kv.emplace_back("patience", std::to_string(patience));
  kv.emplace_back("min_delta", format_double(min_delta));
  kv.emplace_back("batch_size", std::to_string(batch_size));
  kv.emplace_back("seed", std::to_string(seed));
  kv.emplace_back("fusion", fusion_name(fusion));
  kv.emplace_back("model", branch_name(branch));
  kv.emplace_back("domain_adversarial", domain_adversarial ? "1" : "0");
  kv.emplace_back("lambda_mode", lambda_constant ? "constant" : "schedule");
  kv.emplace_back("lambda_value", format_double(lambda_value));
  kv.emplace_back("aux_hrnn", format_double(aux_hrnn));
  kv.emplace_back("aux_cnn", format_double(aux_cnn));
  kv.emplace_back("image_size", std::to_string(image_size));
  kv.emplace_back("alpha", format_double(alpha));
  kv.emplace_back("hidden", std::to_string(hidden));
  kv.emplace_back("val_fraction", format_double(val_fraction));
  kv.emplace_back("majority_vote", majority_vote ? "1" : "0");
  kv.emplace_back("force_uniform_saliency", force_uniform_saliency ? "1" : "0");
  return kv;
}

ModelConfig TrainConfig::model_config(const Dataset& ds) const {
  ModelConfig m;
  m.classes = ds.n_classes();
  m.bands = ds.bands();
  m.hidden = hidden;
  m.image_size = image_size;
  m.alpha = alpha;
  return m;
}

bool early_stop_check(const std::vector<EpochStats>& history, int patience, double min_delta) {
  if (history.empty()) throw UsageError("early_stop_check: empty history");
  if (static_cast<int>(history.size()) <= patience) return false;
  double best = history[0].val_loss;
  int since = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (best - history[i].val_loss >= min_delta) {
      best = history[i].val_loss;
      since = 0;
    } else {
      ++since;
    }
  }
  return since >= patience;
}

double lambda_schedule(int epoch, int max_epochs) {
  double p = static_cast<double>(epoch) / static_cast<double>(max_epochs);
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

// ---------------------------------------------------------------------------
// standardization and per-fold data
// ---------------------------------------------------------------------------

void Standardizer::fit(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("Standardizer::fit: no samples");
  const Tensor& first = ds.samples[indices[0]].features.values;
  mean_ = Tensor(first.shape());
  std_ = Tensor(first.shape());
  for (std::size_t i : indices) {
    const Tensor& v = ds.samples[i].features.values;
    for (std::size_t k = 0; k < v.numel(); ++k) mean_[k] += v[k];
  }
  const double n = static_cast<double>(indices.size());
  for (std::size_t k = 0; k < mean_.numel(); ++k) mean_[k] /= n;
  for (std::size_t i : indices) {
    const Tensor& v = ds.samples[i].features.values;
    for (std::size_t k = 0; k < v.numel(); ++k) {
      double d = v[k] - mean_[k];
      std_[k] += d * d;
    }
  }
  for (std::size_t k = 0; k < std_.numel(); ++k)
    std_[k] = std::max(std::sqrt(std_[k] / n), 1e-8);
  fitted_ = true;
}

Tensor Standardizer::apply(const Tensor& values) const {
  if (!fitted_) throw StateError("Standardizer used before fit");
  ++apply_calls_;
  if (!values.same_shape(mean_))
    throw DimensionError("Standardizer: feature shape mismatch");
  Tensor out(values.shape());
  for (std::size_t k = 0; k < out.numel(); ++k) out[k] = (values[k] - mean_[k]) / std_[k];
  return out;
}

FoldData prepare_fold_data(const Dataset& ds, const std::vector<std::size_t>& fit_indices,
                           const TrainConfig& cfg) {
  FoldData fd;
  fd.ds = &ds;
  fd.stdz.fit(ds, fit_indices);
  fd.features.reserve(ds.samples.size());
  for (const SampleRecord& s : ds.samples) fd.features.push_back(fd.stdz.apply(s.features.values));
  fd.has_images = cfg.fusion != FusionMode::None || cfg.branch != BranchKind::Hrnn;
  if (fd.has_images) {
    fd.grid = build_raster_grid(azimuthal_project(ds.layout, cfg.image_size, cfg.image_size));
    fd.images.reserve(ds.samples.size());
    for (const Tensor& f : fd.features) fd.images.push_back(rasterize(f, fd.grid).raster);
  }
  return fd;
}

// ---------------------------------------------------------------------------
// ensemble construction / serialization
// ---------------------------------------------------------------------------

bool Ensemble::needs_images() const {
  return fusion != FusionMode::None || branch != BranchKind::Hrnn;
}

bool Ensemble::needs_features() const {
  return fusion != FusionMode::None || branch == BranchKind::Hrnn;
}

std::string Ensemble::kind_tag() const {
  std::string tag = fusion == FusionMode::None ? branch_name(branch)
                                               : "fusion-" + fusion_name(fusion);
  if (dhead) tag += "+domain";
  return tag;
}

std::unique_ptr<Ensemble> build_ensemble(const Dataset& ds, const TrainConfig& cfg) {
  auto e = std::make_unique<Ensemble>();
  e->cfg = cfg.model_config(ds);
  e->fusion = cfg.fusion;
  e->branch = cfg.branch;
  int domain_width = 0;
  if (cfg.fusion == FusionMode::None) {
    switch (cfg.branch) {
      case BranchKind::Hrnn:
        e->hrnn = std::make_unique<HrnnModel>(ds.layout, e->cfg, e->store, cfg.seed);
        domain_width = e->hrnn->feature_width();
        break;
      case BranchKind::Cnn:
        e->cnn = std::make_unique<CnnModel>(ds.bands(), e->cfg, e->store, cfg.seed);
        domain_width = e->cnn->feature_width();
        break;
      case BranchKind::Capsule:
        e->caps = std::make_unique<CapsModel>(ds.bands(), e->cfg, e->store, cfg.seed);
        break;
    }
  } else {
    e->hrnn = std::make_unique<HrnnModel>(ds.layout, e->cfg, e->store, cfg.seed);
    e->cnn = std::make_unique<CnnModel>(ds.bands(), e->cfg, e->store, cfg.seed);
    domain_width = e->hrnn->feature_width() + e->cnn->feature_width();
    if (cfg.fusion == FusionMode::Feature || cfg.fusion == FusionMode::Saliency)
      e->fhead = std::make_unique<FusionHead>(domain_width, e->cfg, e->store, cfg.seed);
  }
  if (cfg.domain_adversarial) {
    if (cfg.fusion == FusionMode::None && cfg.branch == BranchKind::Capsule)
      throw ConfigError("domain-adversarial training needs a feature vector; "
                        "the capsule branch does not expose one");
    e->dhead = std::make_unique<DomainHead>(domain_width, e->cfg, e->store, cfg.seed);
  }
  return e;
}

ModelBlocks ensemble_blocks(const Ensemble& e, const std::string& config_echo) {
  ModelBlocks mb;
  mb.kind = e.kind_tag();
  mb.config_echo = config_echo;
  mb.blocks = e.store.snapshot();
  return mb;
}

std::unique_ptr<Ensemble> ensemble_from_blocks(const ModelBlocks& blocks, const Dataset& ds) {
  KvFile kv = KvFile::parse_text(blocks.config_echo, "model config echo");
  TrainConfig cfg = TrainConfig::from_kv(kv);
  auto e = build_ensemble(ds, cfg);
  if (e->kind_tag() != blocks.kind)
    throw DataError("model kind '" + blocks.kind + "' does not match its config echo ('" +
                    e->kind_tag() + "')");
  e->store.restore(blocks.blocks);
  return e;
}

// ---------------------------------------------------------------------------
// forward paths
// ---------------------------------------------------------------------------

namespace {

struct BatchTensors {
  Tensor features;  // [B, ch, bands]; empty when unused
  Tensor images;    // [B, bands, h, w]; empty when unused
  std::vector<int> labels;
  int size = 0;
};

BatchTensors make_batch(const FoldData& fold, const std::vector<std::size_t>& idx,
                        bool want_features, bool want_images, bool want_labels) {
  BatchTensors bt;
  bt.size = static_cast<int>(idx.size());
  if (want_features) {
    const Tensor& f0 = fold.features[idx[0]];
    bt.features = Tensor(Shape{bt.size, f0.dim(0), f0.dim(1)});
    std::size_t stride = f0.numel();
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy(fold.features[idx[k]].data(), fold.features[idx[k]].data() + stride,
                bt.features.data() + k * stride);
  }
  if (want_images) {
    const Tensor& i0 = fold.images[idx[0]];
    bt.images = Tensor(Shape{bt.size, i0.dim(0), i0.dim(1), i0.dim(2)});
    std::size_t stride = i0.numel();
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy(fold.images[idx[k]].data(), fold.images[idx[k]].data() + stride,
                bt.images.data() + k * stride);
  }
  if (want_labels) {
    bt.labels.reserve(idx.size());
    for (std::size_t i : idx) bt.labels.push_back(fold.ds->samples[i].label);
  }
  return bt;
}

// Saliency of the current H-RNN, rasterized per sample and multiplied into
// the image batch. The saliency is a constant for the training step: no
// gradient flows back through its computation.
Tensor weight_images_by_saliency(Ensemble& e, const BatchTensors& bt,
                                 const std::shared_ptr<const RasterGrid>& grid,
                                 bool force_uniform) {
  const int B = bt.size;
  const int ch = bt.features.dim(1), bands = bt.features.dim(2);
  Tensor sal;
  if (force_uniform) {
    sal = Tensor(Shape{B, ch, bands});  // all-zero saliency engages the uniform fallback
  } else {
    sal = input_saliency(
        [&e](Tape& t, Var x) {
          Bind bind(t, e.store, false);
          return e.hrnn->forward(t, bind, x).logits;
        },
        bt.features);
  }
  Tensor weighted(bt.images.shape());
  std::size_t img_stride = bt.images.numel() / static_cast<std::size_t>(B);
  std::size_t sal_stride = static_cast<std::size_t>(ch) * bands;
  for (int b = 0; b < B; ++b) {
    Tensor sal_b(Shape{ch, bands},
                 std::vector<double>(sal.data() + b * sal_stride,
                                     sal.data() + (b + 1) * sal_stride));
    TopoImage sal_img = saliency_to_image(sal_b, grid);
    TopoImage img{Tensor(Shape{bt.images.dim(1), bt.images.dim(2), bt.images.dim(3)},
                         std::vector<double>(bt.images.data() + b * img_stride,
                                             bt.images.data() + (b + 1) * img_stride)),
                  grid};
    TopoImage out = apply_saliency(img, sal_img);
    std::copy(out.raster.data(), out.raster.data() + img_stride,
              weighted.data() + b * img_stride);
  }
  return weighted;
}

struct ForwardOut {
  Var loss;       // emotion objective; invalid when labels were not supplied
  Tensor logits;  // prediction scores [B, C]
  Var feats;      // features for the domain head; invalid for the capsule branch
};

ForwardOut ensemble_forward(Ensemble& e, Tape& tape, const Bind& bind, const BatchTensors& bt,
                            bool train, const TrainConfig& cfg,
                            const std::shared_ptr<const RasterGrid>& grid) {
  ForwardOut out;
  const bool with_loss = !bt.labels.empty();
  if (e.fusion == FusionMode::None) {
    switch (e.branch) {
      case BranchKind::Hrnn: {
        auto r = e.hrnn->forward(tape, bind, tape.constant(bt.features));
        out.logits = r.logits.value();
        out.feats = r.feats;
        if (with_loss) out.loss = softmax_cross_entropy(r.logits, bt.labels);
        break;
      }
      case BranchKind::Cnn: {
        auto c = e.cnn->forward(tape, bind, tape.constant(bt.images), train);
        out.logits = c.logits.value();
        out.feats = c.feats;
        if (with_loss) out.loss = softmax_cross_entropy(c.logits, bt.labels);
        break;
      }
      case BranchKind::Capsule: {
        auto c = e.caps->forward(tape, bind, tape.constant(bt.images));
        out.logits = c.lengths.value();
        if (with_loss) out.loss = margin_loss(c.lengths, bt.labels);
        break;
      }
    }
    return out;
  }

  Var img_leaf;
  if (e.fusion == FusionMode::Saliency) {
    img_leaf = tape.constant(
        weight_images_by_saliency(e, bt, grid, cfg.force_uniform_saliency));
  } else {
    img_leaf = tape.constant(bt.images);
  }
  auto r = e.hrnn->forward(tape, bind, tape.constant(bt.features));
  auto c = e.cnn->forward(tape, bind, img_leaf, train);
  out.feats = concat_cols(r.feats, c.feats);

  Var fused;
  if (e.fusion == FusionMode::Output)
    fused = output_fusion(r.logits, c.logits, cfg.alpha);
  else
    fused = e.fhead->forward(bind, out.feats);
  out.logits = fused.value();
  if (with_loss) {
    Var loss = softmax_cross_entropy(fused, bt.labels);
    loss = add(loss, scale(softmax_cross_entropy(r.logits, bt.labels), cfg.aux_hrnn));
    loss = add(loss, scale(softmax_cross_entropy(c.logits, bt.labels), cfg.aux_cnn));
    out.loss = loss;
  }
  return out;
}

long count_correct(const Tensor& logits, const std::vector<int>& labels) {
  long correct = 0;
  for (int b = 0; b < logits.dim(0); ++b) {
    int best = 0;
    for (int c = 1; c < logits.dim(1); ++c)
      if (logits.at(b, c) > logits.at(b, best)) best = c;
    if (best == labels[static_cast<std::size_t>(b)]) ++correct;
  }
  return correct;
}

std::vector<std::vector<std::size_t>> chunked(const std::vector<std::size_t>& idx, int size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(size)) {
    std::size_t end = std::min(idx.size(), at + static_cast<std::size_t>(size));
    out.emplace_back(idx.begin() + static_cast<long>(at), idx.begin() + static_cast<long>(end));
  }
  return out;
}

// Unified loop behind the public training entry points.
TrainResult run_training(Ensemble& e, const Dataset&, const SplitIndices& split,
                         const DatasetView* heldout, const TrainConfig& cfg, FoldData& fold) {
  if (split.train.empty()) throw UsageError("training: empty training split");
  if (split.val.empty()) throw UsageError("training: empty validation split");
  if (cfg.domain_adversarial && (!heldout || heldout->size() == 0))
    throw UsageError("domain-adversarial training needs held-out samples");
  const bool want_feat = e.needs_features();
  const bool want_img = e.needs_images();

  AdamState adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  RngStream shuffle_rng(cfg.seed, "batching");
  RngStream domain_rng(cfg.seed, "domain-batching");

  std::vector<std::size_t> train_idx = split.train;
  std::vector<std::size_t> heldout_pool;
  std::size_t heldout_at = 0;
  if (cfg.domain_adversarial) heldout_pool = heldout->indices;

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::string, Tensor>> best_blocks;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    const double lambda = !cfg.domain_adversarial ? 0.0
                          : cfg.lambda_constant   ? cfg.lambda_value
                                                  : lambda_schedule(epoch, cfg.max_epochs);
    double loss_sum = 0.0;
    long correct = 0;
    long domain_correct = 0, domain_seen = 0;

    for (const auto& chunk : chunked(train_idx, cfg.batch_size)) {
      BatchTensors bt = make_batch(fold, chunk, want_feat, want_img, true);
      Tape tape;
      Bind bind(tape, e.store, true);
      ForwardOut fw = ensemble_forward(e, tape, bind, bt, true, cfg, fold.grid);
      Var total = fw.loss;

      if (cfg.domain_adversarial) {
        // the held-out half of the mixed batch; emotion labels stay unread
        std::vector<std::size_t> hidx;
        for (int k = 0; k < bt.size; ++k) {
          if (heldout_at == heldout_pool.size()) {
            domain_rng.shuffle(heldout_pool);
            heldout_at = 0;
          }
          hidx.push_back(heldout_pool[heldout_at++]);
        }
        BatchTensors hb = make_batch(fold, hidx, want_feat, want_img, false);
        // eval-mode forward: held-out samples must not move batch-norm state
        ForwardOut hw = ensemble_forward(e, tape, bind, hb, false, cfg, fold.grid);
        Var dfeats = concat_rows(fw.feats, hw.feats);
        Var dlogits = e.dhead->forward(bind, dfeats, lambda);
        std::vector<int> dlabels(static_cast<std::size_t>(bt.size), 0);
        dlabels.insert(dlabels.end(), hidx.size(), 1);
        total = add(total, softmax_cross_entropy(dlogits, dlabels));
        domain_correct += count_correct(dlogits.value(), dlabels);
        domain_seen += static_cast<long>(dlabels.size());
      }

      double loss_value = total.value()[0];
      if (!std::isfinite(loss_value))
        throw NumericalError("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch));
      tape.backward(total);
      auto grads = bind.trainable_grads(tape);
      auto values = bind.trainable_values();
      adam_step(values, grads, adam);

      loss_sum += fw.loss.value()[0] * bt.size;
      correct += count_correct(fw.logits, bt.labels);
    }

    // validation under eval semantics
    double val_loss_sum = 0.0;
    long val_correct = 0;
    for (const auto& chunk : chunked(split.val, cfg.batch_size)) {
      BatchTensors bt = make_batch(fold, chunk, want_feat, want_img, true);
      Tape tape;
      Bind bind(tape, e.store, false);
      ForwardOut fw = ensemble_forward(e, tape, bind, bt, false, cfg, fold.grid);
      val_loss_sum += fw.loss.value()[0] * bt.size;
      val_correct += count_correct(fw.logits, bt.labels);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(train_idx.size());
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(train_idx.size());
    stats.val_loss = val_loss_sum / static_cast<double>(split.val.size());
    stats.val_acc = static_cast<double>(val_correct) / static_cast<double>(split.val.size());
    if (domain_seen > 0)
      stats.domain_acc = static_cast<double>(domain_correct) / static_cast<double>(domain_seen);
    result.history.push_back(stats);

    if (stats.val_loss < best_val) {
      best_val = stats.val_loss;
      best_blocks = e.store.snapshot();
      result.best_epoch = epoch;
    }
    if (early_stop_check(result.history, cfg.patience, cfg.min_delta)) break;
  }

  if (!best_blocks.empty()) e.store.restore(best_blocks);
  return result;
}

}  // namespace

TrainResult train_classifier(Ensemble& model, const Dataset& ds, const SplitIndices& split,
                             const TrainConfig& cfg, FoldData& fold) {
  if (cfg.fusion == FusionMode::Saliency)
    throw UsageError("train_classifier: use train_saliency_fusion for saliency mode");
  if (cfg.domain_adversarial)
    throw UsageError("train_classifier: use train_domain_adversarial");
  return run_training(model, ds, split, nullptr, cfg, fold);
}

TrainResult train_saliency_fusion(Ensemble& model, const Dataset& ds,
                                  const SplitIndices& split, const TrainConfig& cfg,
                                  FoldData& fold) {
  if (cfg.fusion != FusionMode::Saliency)
    throw UsageError("train_saliency_fusion: config does not select saliency fusion");
  if (cfg.domain_adversarial)
    throw UsageError("train_saliency_fusion: use train_domain_adversarial");
  return run_training(model, ds, split, nullptr, cfg, fold);
}

TrainResult train_domain_adversarial(Ensemble& model, const Dataset& ds,
                                     const SplitIndices& split, const DatasetView& heldout,
                                     const TrainConfig& cfg, FoldData& fold) {
  if (!cfg.domain_adversarial)
    throw UsageError("train_domain_adversarial: config does not enable the domain step");
  return run_training(model, ds, split, &heldout, cfg, fold);
}

std::vector<int> predict(Ensemble& model, const std::vector<std::size_t>& indices,
                         const TrainConfig& cfg, FoldData& fold) {
  std::vector<int> out;
  out.reserve(indices.size());
  const bool want_feat = model.needs_features();
  const bool want_img = model.needs_images();
  std::vector<std::size_t> chunk;
  for (std::size_t at = 0; at < indices.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
    std::size_t end = std::min(indices.size(), at + static_cast<std::size_t>(cfg.batch_size));
    chunk.assign(indices.begin() + static_cast<long>(at), indices.begin() + static_cast<long>(end));
    BatchTensors bt = make_batch(fold, chunk, want_feat, want_img, false);
    Tape tape;
    Bind bind(tape, model.store, false);
    ForwardOut fw = ensemble_forward(model, tape, bind, bt, false, cfg, fold.grid);
    for (int b = 0; b < fw.logits.dim(0); ++b) {
      int best = 0;
      for (int c = 1; c < fw.logits.dim(1); ++c)
        if (fw.logits.at(b, c) > fw.logits.at(b, best)) best = c;
      out.push_back(best);
    }
  }
  return out;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::vector<std::string>& header_comments) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const std::string& line : header_comments) out << "# " << line << "\n";
  out << "epoch,train_loss,val_loss,train_acc,val_acc,domain_acc\n";
  for (const EpochStats& s : history) {
    out << s.epoch << ',' << format_double(s.train_loss) << ',' << format_double(s.val_loss)
        << ',' << format_double(s.train_acc) << ',' << format_double(s.val_acc) << ',';
    if (s.domain_acc >= 0.0) out << format_double(s.domain_acc);
    out << '\n';
  }
  if (!out) throw DataError("short write: " + path);
}

double best_output_alpha(const Tensor& logits_a, const Tensor& logits_b,
                         const std::vector<int>& labels, int steps) {
  if (steps < 2) throw UsageError("best_output_alpha: need at least 2 grid points");
  if (!logits_a.same_shape(logits_b)) throw DimensionError("best_output_alpha: shape mismatch");
  double best_alpha = 0.0;
  long best_correct = -1;
  for (int i = 0; i < steps; ++i) {
    double alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
    Tensor fused = output_fusion(logits_a, logits_b, alpha);
    long correct = count_correct(fused, labels);
    if (correct > best_correct) {
      best_correct = correct;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

}  // namespace eegdual
