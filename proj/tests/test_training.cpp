#include <cmath>

#include "doctest.h"
#include "eegdual/data_io.hpp"
#include "eegdual/errors.hpp"
#include "eegdual/eval.hpp"
#include "eegdual/training.hpp"

using namespace eegdual;

namespace {

std::string data_path(const char* rel) { return std::string(EEGDUAL_DATA_DIR) + "/" + rel; }

Dataset tiny_dataset(double sigma_subject, double sigma_noise, std::uint64_t seed,
                     int subjects = 3, int classes = 2) {
  SyntheticSpec spec;
  spec.name = "train-test";
  spec.subjects = subjects;
  spec.trials_per_subject = 2 * classes;
  spec.windows_per_trial = 6;
  spec.classes = classes;
  spec.bands = 3;
  spec.sigma_subject = sigma_subject;
  spec.sigma_noise = sigma_noise;
  spec.seed = seed;
  ElectrodeLayout layout = load_layout(data_path("layouts/deap32.layout"));
  return generate_synthetic(spec, layout, data_path("layouts/deap32.layout"));
}

TrainConfig tiny_config(FusionMode fusion, BranchKind branch, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.fusion = fusion;
  cfg.branch = branch;
  cfg.seed = seed;
  cfg.hidden = 8;
  cfg.image_size = 8;
  cfg.batch_size = 16;
  cfg.max_epochs = 6;
  cfg.patience = 3;
  return cfg;
}

SplitIndices split_of(const Dataset& ds, std::uint64_t seed) {
  // reuse the LOSO stratified split machinery on the first fold's training set
  auto folds = loso_folds(ds, seed);
  return folds[0].split;
}

std::vector<EpochStats> stats_from(std::vector<double> val_losses) {
  std::vector<EpochStats> h;
  for (std::size_t i = 0; i < val_losses.size(); ++i) {
    EpochStats s;
    s.epoch = static_cast<int>(i);
    s.val_loss = val_losses[i];
    h.push_back(s);
  }
  return h;
}

}  // namespace

TEST_CASE("early stop rule") {
  CHECK_FALSE(early_stop_check(stats_from({1.0, 0.9, 0.8}), 5, 1e-4));
  CHECK(early_stop_check(stats_from({1.0, 1.0, 1.0, 1.0, 1.0, 1.0}), 5, 1e-4));
  CHECK_FALSE(early_stop_check(stats_from({1.0, 1.0, 1.0, 1.0, 1.0}), 5, 1e-4));
  // an improvement of exactly min_delta resets the counter (dyadic values so
  // the boundary is exact in floating point)
  const double delta = 0.0001220703125;  // 2^-13
  CHECK_FALSE(early_stop_check(stats_from({1.0, 1.0, 1.0, 1.0, 1.0, 1.0 - delta}), 5, delta));
  // sub-min_delta improvements do not reset it
  CHECK(early_stop_check(stats_from({1.0, 1.0 - delta / 8, 1.0 - delta / 4, 1.0 - delta / 3,
                                     1.0 - delta / 2.5, 1.0 - delta / 2}),
                         5, delta));
  CHECK_THROWS_AS(early_stop_check({}, 5, 1e-4), UsageError);
}

TEST_CASE("lambda schedule endpoints") {
  CHECK(lambda_schedule(0, 100) == doctest::Approx(0.0));
  CHECK(lambda_schedule(100, 100) == doctest::Approx(2.0 / (1.0 + std::exp(-10.0)) - 1.0));
  CHECK(lambda_schedule(50, 100) > 0.9);
}

TEST_CASE("standardizer: train-fold statistics only, sane moments") {
  Dataset ds = tiny_dataset(0.5, 0.5, 21);
  auto folds = loso_folds(ds, 21);
  FoldData fd = prepare_fold_data(ds, folds[0].split.train, tiny_config(FusionMode::None,
                                                                        BranchKind::Hrnn, 21));
  // an independently fitted standardizer over the same indices must agree
  Standardizer check;
  check.fit(ds, folds[0].split.train);
  CHECK(check.mean().vec() == fd.stdz.mean().vec());
  CHECK(check.stddev().vec() == fd.stdz.stddev().vec());

  // standardized training features have mean ~0 per cell
  Tensor mean(fd.features[0].shape());
  for (std::size_t i : folds[0].split.train)
    for (std::size_t k = 0; k < mean.numel(); ++k) mean[k] += fd.features[i][k];
  for (std::size_t k = 0; k < mean.numel(); ++k)
    CHECK(std::abs(mean[k] / static_cast<double>(folds[0].split.train.size())) < 1e-12);

  // fitting on the validation windows instead would give different statistics
  Standardizer other;
  other.fit(ds, folds[0].split.val);
  CHECK(other.mean().vec() != fd.stdz.mean().vec());

  // instrumented access: this fold's standardizer touched each sample exactly
  // once during preparation, and evaluation adds no further reads
  CHECK(fd.stdz.apply_calls() == static_cast<long>(ds.samples.size()));
  TrainConfig cfg = tiny_config(FusionMode::None, BranchKind::Hrnn, 21);
  cfg.max_epochs = 1;
  auto model = build_ensemble(ds, cfg);
  train_classifier(*model, ds, folds[0].split, cfg, fd);
  evaluate_fold(*model, ds, folds[0], cfg, fd);
  CHECK(fd.stdz.apply_calls() == static_cast<long>(ds.samples.size()));
}

TEST_CASE("separable synthetic data reaches full training accuracy") {
  Dataset ds = tiny_dataset(0.0, 0.0, 22);
  TrainConfig cfg = tiny_config(FusionMode::None, BranchKind::Hrnn, 22);
  cfg.max_epochs = 40;
  SplitIndices split = split_of(ds, 22);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  TrainResult res = train_classifier(*model, ds, split, cfg, fd);
  double best_train_acc = 0.0;
  for (const EpochStats& s : res.history) best_train_acc = std::max(best_train_acc, s.train_acc);
  CHECK(best_train_acc == 1.0);
  CHECK(static_cast<int>(res.history.size()) < 150);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  Dataset ds = tiny_dataset(0.4, 0.4, 23);
  TrainConfig cfg = tiny_config(FusionMode::Feature, BranchKind::Hrnn, 23);
  cfg.max_epochs = 3;
  SplitIndices split = split_of(ds, 23);

  FoldData fd1 = prepare_fold_data(ds, split.train, cfg);
  auto m1 = build_ensemble(ds, cfg);
  TrainResult r1 = train_classifier(*m1, ds, split, cfg, fd1);

  FoldData fd2 = prepare_fold_data(ds, split.train, cfg);
  auto m2 = build_ensemble(ds, cfg);
  TrainResult r2 = train_classifier(*m2, ds, split, cfg, fd2);

  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
    CHECK(r1.history[i].train_acc == r2.history[i].train_acc);
  }
  auto s1 = m1->store.snapshot(), s2 = m2->store.snapshot();
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].second.vec() == s2[i].second.vec());
}

TEST_CASE("a vanishing learning rate freezes validation loss and stops at patience+1") {
  Dataset ds = tiny_dataset(0.3, 0.3, 24);
  TrainConfig cfg = tiny_config(FusionMode::None, BranchKind::Hrnn, 24);
  cfg.lr = 1e-300;  // updates vanish below double precision
  cfg.max_epochs = 50;
  cfg.patience = 4;
  SplitIndices split = split_of(ds, 24);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  TrainResult res = train_classifier(*model, ds, split, cfg, fd);
  CHECK(res.history.size() == static_cast<std::size_t>(cfg.patience) + 1);
}

TEST_CASE("the returned parameters reproduce the best validation loss") {
  Dataset ds = tiny_dataset(0.6, 0.6, 25);
  TrainConfig cfg = tiny_config(FusionMode::None, BranchKind::Hrnn, 25);
  cfg.max_epochs = 8;
  SplitIndices split = split_of(ds, 25);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  TrainResult res = train_classifier(*model, ds, split, cfg, fd);
  double best = res.history[0].val_loss;
  for (const EpochStats& s : res.history) best = std::min(best, s.val_loss);

  // re-evaluate the validation split with the restored parameters
  double loss_sum = 0.0;
  for (std::size_t at = 0; at < split.val.size(); at += 16) {
    std::vector<std::size_t> chunk(split.val.begin() + static_cast<long>(at),
                                   split.val.begin() +
                                       static_cast<long>(std::min(split.val.size(), at + 16)));
    Tensor feats(Shape{static_cast<int>(chunk.size()), ds.channels(), ds.bands()});
    std::vector<int> labels;
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const Tensor& f = fd.features[chunk[k]];
      std::copy(f.data(), f.data() + f.numel(), feats.data() + k * f.numel());
      labels.push_back(ds.samples[chunk[k]].label);
    }
    Tape t;
    Bind bind(t, model->store, false);
    auto out = model->hrnn->forward(t, bind, t.constant(feats));
    loss_sum += softmax_cross_entropy(out.logits, labels).value()[0] *
                static_cast<double>(chunk.size());
  }
  CHECK(loss_sum / static_cast<double>(split.val.size()) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("saliency is treated as a constant: CNN-only loss moves no H-RNN weight") {
  Dataset ds = tiny_dataset(0.4, 0.4, 26);
  TrainConfig cfg = tiny_config(FusionMode::Saliency, BranchKind::Hrnn, 26);
  SplitIndices split = split_of(ds, 26);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);

  // one hand-built step: saliency-weighted images fed to the CNN, CNN loss only
  std::vector<std::size_t> chunk(split.train.begin(), split.train.begin() + 8);
  Tensor feats(Shape{8, ds.channels(), ds.bands()});
  Tensor images(Shape{8, ds.bands(), 8, 8});
  std::vector<int> labels;
  for (std::size_t k = 0; k < chunk.size(); ++k) {
    std::copy(fd.features[chunk[k]].data(),
              fd.features[chunk[k]].data() + fd.features[chunk[k]].numel(),
              feats.data() + k * fd.features[chunk[k]].numel());
    std::copy(fd.images[chunk[k]].data(),
              fd.images[chunk[k]].data() + fd.images[chunk[k]].numel(),
              images.data() + k * fd.images[chunk[k]].numel());
    labels.push_back(ds.samples[chunk[k]].label);
  }
  Tensor sal = input_saliency(
      [&](Tape& t, Var x) {
        Bind b(t, model->store, false);
        return model->hrnn->forward(t, b, x).logits;
      },
      feats);
  Tensor weighted(images.shape());
  std::size_t stride = static_cast<std::size_t>(ds.bands()) * 8 * 8;
  for (int b = 0; b < 8; ++b) {
    Tensor sal_b(Shape{ds.channels(), ds.bands()},
                 std::vector<double>(sal.data() + b * ds.channels() * ds.bands(),
                                     sal.data() + (b + 1) * ds.channels() * ds.bands()));
    TopoImage wi = apply_saliency(
        TopoImage{Tensor(Shape{ds.bands(), 8, 8},
                         std::vector<double>(images.data() + b * stride,
                                             images.data() + (b + 1) * stride)),
                  fd.grid},
        saliency_to_image(sal_b, fd.grid));
    std::copy(wi.raster.data(), wi.raster.data() + stride, weighted.data() + b * stride);
  }

  Tape tape;
  Bind bind(tape, model->store, true);
  auto c = model->cnn->forward(tape, bind, tape.constant(weighted), true);
  tape.backward(softmax_cross_entropy(c.logits, labels));
  // every H-RNN gradient is exactly zero: nothing flows through the saliency
  for (std::size_t i = 0; i < model->store.size(); ++i) {
    const ParamBlock& blk = model->store.block(i);
    if (!blk.trainable || blk.name.rfind("hrnn.", 0) != 0) continue;
    const Tensor& g = tape.grad(bind[blk.value]);
    for (std::size_t k = 0; k < g.numel(); ++k) CHECK(g[k] == 0.0);
  }
}

TEST_CASE("saliency fusion recomputes the saliency exactly once per batch") {
  Dataset ds = tiny_dataset(0.4, 0.4, 27);
  TrainConfig cfg = tiny_config(FusionMode::Saliency, BranchKind::Hrnn, 27);
  cfg.max_epochs = 2;
  SplitIndices split = split_of(ds, 27);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  reset_saliency_eval_count();
  train_saliency_fusion(*model, ds, split, cfg, fd);
  auto batches = [&](std::size_t n) {
    return (n + static_cast<std::size_t>(cfg.batch_size) - 1) /
           static_cast<std::size_t>(cfg.batch_size);
  };
  long expected = static_cast<long>(cfg.max_epochs) *
                  static_cast<long>(batches(split.train.size()) + batches(split.val.size()));
  CHECK(saliency_eval_count() == expected);
}

TEST_CASE("forced uniform saliency makes saliency fusion equal feature fusion") {
  Dataset ds = tiny_dataset(0.4, 0.4, 28);
  SplitIndices split = split_of(ds, 28);

  TrainConfig fcfg = tiny_config(FusionMode::Feature, BranchKind::Hrnn, 28);
  fcfg.max_epochs = 2;
  FoldData fd1 = prepare_fold_data(ds, split.train, fcfg);
  auto feature_model = build_ensemble(ds, fcfg);
  train_classifier(*feature_model, ds, split, fcfg, fd1);

  TrainConfig scfg = fcfg;
  scfg.fusion = FusionMode::Saliency;
  scfg.force_uniform_saliency = true;
  FoldData fd2 = prepare_fold_data(ds, split.train, scfg);
  auto saliency_model = build_ensemble(ds, scfg);
  train_saliency_fusion(*saliency_model, ds, split, scfg, fd2);

  auto s1 = feature_model->store.snapshot(), s2 = saliency_model->store.snapshot();
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i].first == s2[i].first);
    CHECK(s1[i].second.vec() == s2[i].second.vec());  // parameter-for-parameter
  }
}

TEST_CASE("domain step at lambda zero reproduces the baseline bit for bit") {
  Dataset ds = tiny_dataset(0.5, 0.5, 29);
  SplitIndices split = split_of(ds, 29);
  auto folds = loso_folds(ds, 29);

  TrainConfig base_cfg = tiny_config(FusionMode::None, BranchKind::Cnn, 29);
  base_cfg.max_epochs = 3;
  FoldData fd1 = prepare_fold_data(ds, split.train, base_cfg);
  auto baseline = build_ensemble(ds, base_cfg);
  train_classifier(*baseline, ds, split, base_cfg, fd1);

  TrainConfig dom_cfg = base_cfg;
  dom_cfg.domain_adversarial = true;
  dom_cfg.lambda_constant = true;
  dom_cfg.lambda_value = 0.0;
  FoldData fd2 = prepare_fold_data(ds, split.train, dom_cfg);
  auto adversarial = build_ensemble(ds, dom_cfg);
  DatasetView heldout;
  heldout.ds = &ds;
  heldout.indices = folds[0].test_indices;
  train_domain_adversarial(*adversarial, ds, split, heldout, dom_cfg, fd2);

  CHECK(heldout.label_reads == 0);  // emotion labels of the held-out set stay hidden
  for (std::size_t i = 0; i < baseline->store.size(); ++i) {
    const ParamBlock& blk = baseline->store.block(i);
    Tensor* other = adversarial->store.find(blk.name);
    REQUIRE(other != nullptr);
    CHECK(blk.value.vec() == other->vec());
  }
}

TEST_CASE("training loss decreases on learnable data") {
  Dataset ds = tiny_dataset(0.5, 0.5, 30);
  TrainConfig cfg = tiny_config(FusionMode::None, BranchKind::Hrnn, 30);
  cfg.max_epochs = 10;
  SplitIndices split = split_of(ds, 30);
  FoldData fd = prepare_fold_data(ds, split.train, cfg);
  auto model = build_ensemble(ds, cfg);
  TrainResult res = train_classifier(*model, ds, split, cfg, fd);
  CHECK(res.history.back().train_loss < res.history.front().train_loss);
}

TEST_CASE("ensemble serialization round trips through model blocks") {
  Dataset ds = tiny_dataset(0.4, 0.4, 31);
  for (FusionMode fusion : {FusionMode::None, FusionMode::Output, FusionMode::Feature,
                            FusionMode::Saliency}) {
    TrainConfig cfg = tiny_config(fusion, BranchKind::Capsule, 31);
    if (fusion != FusionMode::None) cfg.branch = BranchKind::Hrnn;
    auto model = build_ensemble(ds, cfg);
    std::string echo = canonical_text(cfg.to_kv());
    ModelBlocks blocks = ensemble_blocks(*model, echo);
    auto restored = ensemble_from_blocks(blocks, ds);
    CHECK(restored->kind_tag() == model->kind_tag());
    auto a = model->store.snapshot(), b = restored->store.snapshot();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.vec() == b[i].second.vec());
  }
}

TEST_CASE("train config parsing rejects unknown keys and bad values") {
  KvFile kv = KvFile::parse_text("lr = 0.01\nfusion = feature\n", "test");
  TrainConfig cfg = TrainConfig::from_kv(kv);
  CHECK(cfg.lr == 0.01);
  CHECK(cfg.fusion == FusionMode::Feature);

  CHECK_THROWS_AS(TrainConfig::from_kv(KvFile::parse_text("walrus = 1\n", "t")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KvFile::parse_text("lr = -1\n", "t")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KvFile::parse_text("alpha = 2\n", "t")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KvFile::parse_text("fusion = sideways\n", "t")),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_kv(KvFile::parse_text("image_size = 12\n", "t")),
                  ConfigError);
  // meta entries from config echoes pass through unharmed
  CHECK_NOTHROW(TrainConfig::from_kv(KvFile::parse_text("meta.dataset = x\n", "t")));
}

TEST_CASE("alpha grid helper favors the stronger branch") {
  // branch a is always right, branch b always wrong: any alpha past 0.5
  // scores 100%, and ties resolve to the smallest such grid point
  Tensor a(Shape{4, 2});
  Tensor b(Shape{4, 2});
  std::vector<int> labels{0, 1, 0, 1};
  for (int i = 0; i < 4; ++i) {
    a.at(i, labels[static_cast<std::size_t>(i)]) = 2.0;
    b.at(i, 1 - labels[static_cast<std::size_t>(i)]) = 2.0;
  }
  CHECK(best_output_alpha(a, b, labels) > 0.5);
  CHECK(best_output_alpha(a, b, labels) == 0.55);
  CHECK(best_output_alpha(b, a, labels) < 0.5);
}
