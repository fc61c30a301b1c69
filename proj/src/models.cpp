#include "eegdual/models.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

Tensor& ParamStore::add(std::string name, Tensor init, bool trainable) {
  for (const ParamBlock& b : blocks_)
    if (b.name == name) throw UsageError("duplicate parameter block '" + name + "'");
  blocks_.push_back(ParamBlock{std::move(name), std::move(init), trainable});
  index_[&blocks_.back().value] = static_cast<int>(blocks_.size()) - 1;
  return blocks_.back().value;
}

int ParamStore::index_of(const Tensor* t) const {
  auto it = index_.find(t);
  return it == index_.end() ? -1 : it->second;
}

Tensor* ParamStore::find(const std::string& name) {
  for (ParamBlock& b : blocks_)
    if (b.name == name) return &b.value;
  return nullptr;
}

long ParamStore::parameter_count(const std::string& prefix, bool trainable_only) const {
  long n = 0;
  for (const ParamBlock& b : blocks_) {
    if (trainable_only && !b.trainable) continue;
    if (!prefix.empty() && b.name.rfind(prefix, 0) != 0) continue;
    n += static_cast<long>(b.value.numel());
  }
  return n;
}

std::vector<std::pair<std::string, Tensor>> ParamStore::snapshot() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(blocks_.size());
  for (const ParamBlock& b : blocks_) out.emplace_back(b.name, b.value);
  return out;
}

void ParamStore::restore(const std::vector<std::pair<std::string, Tensor>>& blocks) {
  if (blocks.size() != blocks_.size())
    throw DataError("restore: block count " + std::to_string(blocks.size()) +
                    " does not match model (" + std::to_string(blocks_.size()) + ")");
  for (const auto& [name, value] : blocks) {
    Tensor* dst = find(name);
    if (!dst) throw DataError("restore: unknown block '" + name + "'");
    if (!dst->same_shape(value))
      throw DataError("restore: block '" + name + "' has shape " + shape_str(value.shape()) +
                      ", expected " + shape_str(dst->shape()));
    *dst = value;
  }
}

std::vector<Tensor> ParamStore::values_copy() const {
  std::vector<Tensor> out;
  for (const ParamBlock& b : blocks_)
    if (b.trainable) out.push_back(b.value);
  return out;
}

void ParamStore::assign_values(const std::vector<Tensor>& vals) {
  std::size_t k = 0;
  for (ParamBlock& b : blocks_)
    if (b.trainable) {
      if (k >= vals.size() || !vals[k].same_shape(b.value))
        throw DimensionError("assign_values: snapshot does not match parameter list");
      b.value = vals[k++];
    }
  if (k != vals.size()) throw DimensionError("assign_values: extra snapshot blocks");
}

Bind::Bind(Tape& t, ParamStore& store, bool track) : store_(&store) {
  vars_.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.block(i).trainable) vars_[i] = t.leaf(store.block(i).value, track);
}

Bind::Bind(ParamStore& store, std::vector<Var> trainable_leaves) : store_(&store) {
  vars_.resize(store.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.block(i).trainable) {
      if (k >= trainable_leaves.size())
        throw UsageError("Bind: not enough leaves for the trainable blocks");
      vars_[i] = trainable_leaves[k++];
    }
  if (k != trainable_leaves.size()) throw UsageError("Bind: extra leaves");
}

Var Bind::operator[](const Tensor& param) const {
  int i = store_->index_of(&param);
  if (i < 0 || !vars_[static_cast<std::size_t>(i)].valid())
    throw UsageError("Bind: tensor is not a bound trainable block");
  return vars_[static_cast<std::size_t>(i)];
}

std::vector<const Tensor*> Bind::trainable_grads(const Tape& t) const {
  std::vector<const Tensor*> out;
  for (std::size_t i = 0; i < store_->size(); ++i)
    if (store_->block(i).trainable) out.push_back(&t.grad(vars_[i]));
  return out;
}

std::vector<Tensor*> Bind::trainable_values() const {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < store_->size(); ++i)
    if (store_->block(i).trainable) out.push_back(&store_->block(i).value);
  return out;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

namespace {

Tensor uniform_init(Shape shape, double bound, std::uint64_t seed, const std::string& name) {
  Tensor t(std::move(shape));
  RngStream rng(seed, "init/" + name);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

Tensor xavier_init(Shape shape, int fan_in, int fan_out, std::uint64_t seed,
                   const std::string& name) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init(std::move(shape), a, seed, name);
}

}  // namespace

void Dense::init(ParamStore& store, const std::string& prefix, int in, int out,
                 std::uint64_t seed) {
  w = &store.add(prefix + ".w", xavier_init({in, out}, in, out, seed, prefix + ".w"));
  b = &store.add(prefix + ".b", Tensor(Shape{out}));
}

Var Dense::operator()(const Bind& bind, Var x) const {
  return add_bias(matmul(x, bind[*w]), bind[*b]);
}

void GruCell::init(ParamStore& store, const std::string& prefix, int in, int hidden_size,
                   std::uint64_t seed) {
  hidden = hidden_size;
  double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  w_ih = &store.add(prefix + ".w_ih",
                    uniform_init({in, 3 * hidden_size}, bound, seed, prefix + ".w_ih"));
  w_hh = &store.add(prefix + ".w_hh",
                    uniform_init({hidden_size, 3 * hidden_size}, bound, seed, prefix + ".w_hh"));
  b_ih = &store.add(prefix + ".b_ih",
                    uniform_init({3 * hidden_size}, bound, seed, prefix + ".b_ih"));
  b_hh = &store.add(prefix + ".b_hh",
                    uniform_init({3 * hidden_size}, bound, seed, prefix + ".b_hh"));
}

Var GruCell::step(const Bind& bind, Var x, Var h) const {
  const int H = hidden;
  Var gi = add_bias(matmul(x, bind[*w_ih]), bind[*b_ih]);
  Var gh = add_bias(matmul(h, bind[*w_hh]), bind[*b_hh]);
  Var r = sigmoid(add(slice_cols(gi, 0, H), slice_cols(gh, 0, H)));
  Var z = sigmoid(add(slice_cols(gi, H, H), slice_cols(gh, H, H)));
  Var n = tanh_act(add(slice_cols(gi, 2 * H, H), mul(r, slice_cols(gh, 2 * H, H))));
  return add(n, mul(z, sub(h, n)));
}

void Conv::init(ParamStore& store, const std::string& prefix, int cin, int cout, int k,
                std::uint64_t seed, bool with_bias) {
  kernels = &store.add(prefix + ".kernels", xavier_init({cout, cin, k, k}, cin * k * k,
                                                        cout * k * k, seed, prefix + ".kernels"));
  bias = with_bias ? &store.add(prefix + ".bias", Tensor(Shape{cout})) : nullptr;
}

Var Conv::operator()(const Bind& bind, Var x, int stride, int pad) const {
  Var y = conv2d(x, bind[*kernels], stride, pad);
  return bias ? add_chan_bias(y, bind[*bias]) : y;
}

void BatchNorm::init(ParamStore& store, const std::string& prefix, int channels) {
  gamma = &store.add(prefix + ".gamma", Tensor(Shape{channels}, 1.0));
  beta = &store.add(prefix + ".beta", Tensor(Shape{channels}));
  running_mean = &store.add(prefix + ".running_mean", Tensor(Shape{channels}), false);
  running_var = &store.add(prefix + ".running_var", Tensor(Shape{channels}, 1.0), false);
  batches = &store.add(prefix + ".batches", Tensor(Shape{1}), false);
}

Var BatchNorm::operator()(const Bind& bind, Var x, bool train) const {
  return batchnorm2d(x, bind[*gamma], bind[*beta], train, *running_mean, *running_var, *batches);
}

// ---------------------------------------------------------------------------
// H-RNN branch
// ---------------------------------------------------------------------------

HrnnModel::HrnnModel(const ElectrodeLayout& layout, const ModelConfig& cfg, ParamStore& store,
                     std::uint64_t seed, const std::string& prefix)
    : hidden_(cfg.hidden), classes_(cfg.classes), bands_(cfg.bands), channels_(layout.size()) {
  const int regions = layout.region_count;
  region_electrodes_.resize(static_cast<std::size_t>(regions));
  std::vector<std::array<int, 3>> hemi_counts(static_cast<std::size_t>(regions), {0, 0, 0});
  for (int e = 0; e < layout.size(); ++e) {
    const Electrode& el = layout.electrodes[static_cast<std::size_t>(e)];
    region_electrodes_[static_cast<std::size_t>(el.region)].push_back(e);
    hemi_counts[static_cast<std::size_t>(el.region)][static_cast<std::size_t>(el.hemisphere)]++;
  }
  for (int r = 0; r < regions; ++r) {
    if (region_electrodes_[static_cast<std::size_t>(r)].empty())
      throw DataError("layout region " + std::to_string(r) + " has no electrodes");
    const auto& c = hemi_counts[static_cast<std::size_t>(r)];
    int l = c[static_cast<int>(Hemisphere::Left)];
    int rr = c[static_cast<int>(Hemisphere::Right)];
    int m = c[static_cast<int>(Hemisphere::Midline)];
    Hemisphere h = Hemisphere::Midline;  // ties and mixed regions sit on the midline
    if (l > rr && l > m) h = Hemisphere::Left;
    else if (rr > l && rr > m) h = Hemisphere::Right;
    hemisphere_regions_[static_cast<std::size_t>(h)].push_back(r);
  }

  electrode_cells_.resize(static_cast<std::size_t>(regions));
  for (int r = 0; r < regions; ++r)
    electrode_cells_[static_cast<std::size_t>(r)].init(
        store, prefix + ".elec" + std::to_string(r), bands_, hidden_, seed);
  region_cell_.init(store, prefix + ".region", hidden_, hidden_, seed);
  hemi_cell_.init(store, prefix + ".hemi", hidden_, hidden_, seed);
  head_.init(store, prefix + ".head", hidden_, classes_, seed);
}

HrnnModel::Out HrnnModel::forward(Tape& t, const Bind& bind, Var x) const {
  const Tensor& X = x.value();
  if (X.ndim() != 3 || X.dim(1) != channels_ || X.dim(2) != bands_)
    throw DataError("hrnn_forward: input " + shape_str(X.shape()) + " does not match layout (" +
                    std::to_string(channels_) + " channels, " + std::to_string(bands_) +
                    " bands)");
  const int B = X.dim(0);
  auto zeros = [&t, B, this]() { return t.constant(Tensor(Shape{B, hidden_})); };

  Out out;
  const int regions = static_cast<int>(region_electrodes_.size());
  out.region_summaries.reserve(static_cast<std::size_t>(regions));
  for (int r = 0; r < regions; ++r) {
    Var h = zeros();
    for (int e : region_electrodes_[static_cast<std::size_t>(r)])
      h = electrode_cells_[static_cast<std::size_t>(r)].step(bind, row_slice(x, e), h);
    out.region_summaries.push_back(h);
  }

  std::vector<Var> region_out(static_cast<std::size_t>(regions));
  Var h2 = zeros();
  for (int r = 0; r < regions; ++r) {
    h2 = region_cell_.step(bind, out.region_summaries[static_cast<std::size_t>(r)], h2);
    region_out[static_cast<std::size_t>(r)] = h2;
  }

  Var h3 = zeros();
  for (const auto& members : hemisphere_regions_) {
    Var summary;
    if (members.empty()) {
      summary = zeros();
    } else {
      summary = region_out[static_cast<std::size_t>(members[0])];
      for (std::size_t k = 1; k < members.size(); ++k)
        summary = add(summary, region_out[static_cast<std::size_t>(members[k])]);
      summary = scale(summary, 1.0 / static_cast<double>(members.size()));
    }
    h3 = hemi_cell_.step(bind, summary, h3);
  }

  out.feats = h3;
  out.logits = head_(bind, h3);
  return out;
}

// ---------------------------------------------------------------------------
// CNN branch
// ---------------------------------------------------------------------------

CnnModel::CnnModel(int in_channels, const ModelConfig& cfg, ParamStore& store,
                   std::uint64_t seed, const std::string& prefix)
    : width3_(cfg.cnn_width3), classes_(cfg.classes) {
  auto make_block = [&](std::vector<ConvBn>& block, int count, int cin, int cout,
                        const std::string& bprefix) {
    block.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      std::string lp = bprefix + ".conv" + std::to_string(i);
      // the following batch norm would cancel any conv bias exactly
      block[static_cast<std::size_t>(i)].conv.init(store, lp, i == 0 ? cin : cout, cout, 3,
                                                   seed, false);
      block[static_cast<std::size_t>(i)].bn.init(store, lp + ".bn", cout);
    }
  };
  make_block(block1_, 4, in_channels, cfg.cnn_width1, prefix + ".block1");
  make_block(block2_, 2, cfg.cnn_width1, cfg.cnn_width2, prefix + ".block2");
  make_block(block3_, 1, cfg.cnn_width2, cfg.cnn_width3, prefix + ".block3");
  head_.init(store, prefix + ".head", cfg.cnn_width3, classes_, seed);
}

CnnModel::Out CnnModel::forward(Tape&, const Bind& bind, Var img, bool train) const {
  const Tensor& X = img.value();
  if (X.ndim() != 4) throw DimensionError("cnn_forward: input must be [B,bands,H,W]");
  if (X.dim(2) != X.dim(3) || X.dim(2) % 8 != 0)
    throw DimensionError("cnn_forward: spatial size " + std::to_string(X.dim(2)) + "x" +
                         std::to_string(X.dim(3)) + " must be square and divisible by 8");
  Var h = img;
  for (const auto* block : {&block1_, &block2_, &block3_}) {
    for (const ConvBn& layer : *block)
      h = relu(layer.bn(bind, layer.conv(bind, h, 1, 1), train));
    h = maxpool2d(h, 2, 2);
  }
  Out out;
  out.feats = mean_hw(h);
  out.logits = head_(bind, out.feats);
  return out;
}

// ---------------------------------------------------------------------------
// capsule branch
// ---------------------------------------------------------------------------

CapsModel::CapsModel(int in_channels, const ModelConfig& cfg, ParamStore& store,
                     std::uint64_t seed, const std::string& prefix)
    : classes_(cfg.classes),
      types_(cfg.caps_primary_types),
      prim_dim_(cfg.caps_primary_dim),
      class_dim_(cfg.caps_class_dim),
      iters_(cfg.caps_routing_iters),
      image_size_(cfg.image_size) {
  if (image_size_ % 2 != 0) throw ConfigError("capsule branch needs an even image size");
  stem_.init(store, prefix + ".stem", in_channels, cfg.caps_stem, 3, seed);
  primary_.init(store, prefix + ".primary", cfg.caps_stem, types_ * prim_dim_, 3, seed);
  const int half = image_size_ / 2;
  primary_count_ = types_ * half * half;
  predict_w_ = &store.add(
      prefix + ".predict_w",
      xavier_init({primary_count_, classes_, prim_dim_, class_dim_}, prim_dim_, class_dim_,
                  seed, prefix + ".predict_w"));
}

CapsModel::Out CapsModel::forward(Tape& t, const Bind& bind, Var img) const {
  const Tensor& X = img.value();
  if (X.ndim() != 4) throw DimensionError("caps_forward: input must be [B,bands,H,W]");
  if (X.dim(2) != image_size_ || X.dim(3) != image_size_)
    throw DimensionError("caps_forward: expected " + std::to_string(image_size_) + "x" +
                         std::to_string(image_size_) + " images, got " +
                         std::to_string(X.dim(2)) + "x" + std::to_string(X.dim(3)));
  const int B = X.dim(0);
  Var h = relu(stem_(bind, img, 1, 1));
  h = primary_(bind, h, 2, 1);                 // [B, types*dim, H/2, W/2]
  Var u = squash(caps_reshape(h, prim_dim_));  // [B, I, dim]
  Var uhat = caps_predict(u, bind[*predict_w_]);

  Var b_logits = t.constant(Tensor(Shape{B, primary_count_, classes_}));
  Var v;
  for (int it = 0; it < iters_; ++it) {
    Var c = softmax_lastdim(b_logits);  // simplex over class capsules
    Var s = caps_mix(c, uhat);
    v = squash(s);
    if (it + 1 < iters_) b_logits = add(b_logits, caps_agree(uhat, v));
  }
  Out out;
  out.lengths = norm_lastdim(v);
  out.logits = out.lengths;
  return out;
}

Var margin_loss(Var lengths, const std::vector<int>& labels, double m_pos, double m_neg,
                double neg_weight) {
  const Tensor& L = lengths.value();
  if (L.ndim() != 2) throw DimensionError("margin_loss: lengths must be [B,C]");
  const int B = L.dim(0), C = L.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw DimensionError("margin_loss: one label per row required");
  Tensor onehot(Shape{B, C}), inverse(Shape{B, C});
  for (int b = 0; b < B; ++b) {
    int lb = labels[static_cast<std::size_t>(b)];
    if (lb < 0 || lb >= C) throw DataError("margin_loss: label out of range");
    for (int c = 0; c < C; ++c) {
      onehot.at(b, c) = c == lb ? 1.0 : 0.0;
      inverse.at(b, c) = c == lb ? 0.0 : 1.0;
    }
  }
  Tape* t = lengths.tape;
  Var T = t->constant(std::move(onehot));
  Var notT = t->constant(std::move(inverse));
  Var pos = relu(add_scalar(scale(lengths, -1.0), m_pos));  // max(0, m+ - len)
  Var neg = relu(add_scalar(lengths, -m_neg));              // max(0, len - m-)
  Var pos_term = sum_all(mul(mul(pos, pos), T));
  Var neg_term = sum_all(mul(mul(neg, neg), notT));
  return scale(add(pos_term, scale(neg_term, neg_weight)), 1.0 / static_cast<double>(B));
}

// ---------------------------------------------------------------------------
// fusion / domain heads
// ---------------------------------------------------------------------------

FusionHead::FusionHead(int in_width, const ModelConfig& cfg, ParamStore& store,
                       std::uint64_t seed, const std::string& prefix) {
  hidden_.init(store, prefix + ".hidden", in_width, cfg.fusion_hidden, seed);
  out_.init(store, prefix + ".out", cfg.fusion_hidden, cfg.classes, seed);
}

Var FusionHead::forward(const Bind& bind, Var feats) const {
  return out_(bind, relu(hidden_(bind, feats)));
}

DomainHead::DomainHead(int in_width, const ModelConfig& cfg, ParamStore& store,
                       std::uint64_t seed, const std::string& prefix) {
  hidden_.init(store, prefix + ".hidden", in_width, cfg.domain_hidden, seed);
  out_.init(store, prefix + ".out", cfg.domain_hidden, 2, seed);
}

Var DomainHead::forward(const Bind& bind, Var feats, double lambda) const {
  return out_(bind, relu(hidden_(bind, grad_reverse(feats, lambda))));
}

Var output_fusion(Var logits_a, Var logits_b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("output_fusion: alpha must lie in [0, 1]");
  if (alpha == 1.0) return logits_a;
  if (alpha == 0.0) return logits_b;
  return add(scale(logits_a, alpha), scale(logits_b, 1.0 - alpha));
}

Tensor output_fusion(const Tensor& a, const Tensor& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("output_fusion: alpha must lie in [0, 1]");
  if (!a.same_shape(b)) throw DimensionError("output_fusion: shape mismatch");
  if (alpha == 1.0) return a;
  if (alpha == 0.0) return b;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = alpha * a[i] + (1.0 - alpha) * b[i];
  return out;
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

namespace {
std::atomic<long> g_saliency_evals{0};
}

long saliency_eval_count() { return g_saliency_evals.load(); }
void reset_saliency_eval_count() { g_saliency_evals.store(0); }

Tensor input_saliency(const std::function<Var(Tape&, Var)>& forward_logits,
                      const Tensor& x_batch) {
  g_saliency_evals.fetch_add(1);
  Tape tape;
  Var x = tape.leaf(x_batch, true);
  Var logits = forward_logits(tape, x);
  const Tensor& L = logits.value();
  if (L.ndim() != 2 || L.dim(0) != x_batch.dim(0))
    throw DimensionError("input_saliency: forward must produce [B,C] logits");
  std::vector<int> predicted(static_cast<std::size_t>(L.dim(0)));
  for (int b = 0; b < L.dim(0); ++b) {
    int best = 0;
    for (int c = 1; c < L.dim(1); ++c)
      if (L.at(b, c) > L.at(b, best)) best = c;
    predicted[static_cast<std::size_t>(b)] = best;
  }
  tape.backward(pick_sum(logits, predicted));
  Tensor sal = tape.grad(x);
  for (std::size_t i = 0; i < sal.numel(); ++i) sal[i] = std::abs(sal[i]);
  return sal;
}

// ---------------------------------------------------------------------------
// finite-difference battery entries for full branches
// ---------------------------------------------------------------------------

namespace {

ElectrodeLayout tiny_layout() {
  ElectrodeLayout layout;
  auto put = [&layout](const char* label, double x, double y, double z, int region,
                       Hemisphere h) {
    Electrode e;
    e.label = label;
    double n = std::sqrt(x * x + y * y + z * z);
    e.x = x / n;
    e.y = y / n;
    e.z = z / n;
    e.region = region;
    e.hemisphere = h;
    layout.electrodes.push_back(std::move(e));
  };
  put("a0", -0.5, 0.5, 0.7, 0, Hemisphere::Left);
  put("a1", -0.6, 0.0, 0.8, 0, Hemisphere::Left);
  put("b0", 0.5, 0.5, 0.7, 1, Hemisphere::Right);
  put("b1", 0.6, 0.0, 0.8, 1, Hemisphere::Right);
  put("m0", 0.0, 0.7, 0.7, 2, Hemisphere::Midline);
  put("m1", 0.0, -0.7, 0.7, 2, Hemisphere::Midline);
  layout.region_count = 3;
  return layout;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.classes = 3;
  cfg.bands = 2;
  cfg.hidden = 4;
  cfg.image_size = 8;
  cfg.cnn_width1 = 4;
  cfg.cnn_width2 = 6;
  cfg.cnn_width3 = 8;
  cfg.caps_stem = 4;
  cfg.caps_primary_types = 2;
  cfg.caps_primary_dim = 4;
  cfg.caps_class_dim = 4;
  cfg.fusion_hidden = 6;
  cfg.domain_hidden = 5;
  return cfg;
}

std::vector<Tensor> trainable_values(const ParamStore& store) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.block(i).trainable) out.push_back(store.block(i).value);
  return out;
}

Tensor random_input(Shape s, std::uint64_t salt) {
  Tensor t(std::move(s));
  RngStream rng(salt, "gradcheck-model-input");
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

std::vector<NamedGraphCase> model_gradcheck_cases() {
  std::vector<NamedGraphCase> cases;
  const std::vector<int> labels{0, 1};

  {  // single gated recurrent step
    auto store = std::make_shared<ParamStore>();
    auto cell = std::make_shared<GruCell>();
    cell->init(*store, "gru", 3, 4, 7);
    std::vector<Tensor> inputs;
    inputs.push_back(random_input({2, 3}, 1));
    inputs.push_back(random_input({2, 4}, 2));
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"gru_cell",
         [store, cell](Tape&, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in.begin() + 2, in.end()));
           Var h = cell->step(bind, in[0], in[1]);
           return mean_all(mul(h, h));
         },
         std::move(inputs)});
  }

  {  // H-RNN branch end to end
    auto store = std::make_shared<ParamStore>();
    auto model = std::make_shared<HrnnModel>(tiny_layout(), tiny_config(), *store, 11);
    std::vector<Tensor> inputs;
    inputs.push_back(random_input({2, 6, 2}, 3));
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"hrnn_branch",
         [store, model, labels](Tape& t, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in.begin() + 1, in.end()));
           auto out = model->forward(t, bind, in[0]);
           return softmax_cross_entropy(out.logits, labels);
         },
         std::move(inputs)});
  }

  {  // CNN branch end to end, train-mode batch norm
    auto store = std::make_shared<ParamStore>();
    auto model = std::make_shared<CnnModel>(2, tiny_config(), *store, 13);
    std::vector<Tensor> inputs;
    inputs.push_back(random_input({2, 2, 8, 8}, 4));
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"cnn_branch",
         [store, model, labels](Tape& t, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in.begin() + 1, in.end()));
           auto out = model->forward(t, bind, in[0], true);
           return softmax_cross_entropy(out.logits, labels);
         },
         std::move(inputs)});
  }

  {  // capsule branch with margin loss through 3 routing iterations
    auto store = std::make_shared<ParamStore>();
    auto model = std::make_shared<CapsModel>(2, tiny_config(), *store, 17);
    std::vector<Tensor> inputs;
    inputs.push_back(random_input({2, 2, 8, 8}, 5));
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"capsule_branch",
         [store, model, labels](Tape& t, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in.begin() + 1, in.end()));
           auto out = model->forward(t, bind, in[0]);
           return margin_loss(out.lengths, labels);
         },
         std::move(inputs)});
  }

  {  // both branches, concatenated features, fusion head, joint loss;
     // seeds picked so every parameter gradient clears the finite-difference
     // noise floor at eps = 1e-5
    auto store = std::make_shared<ParamStore>();
    ModelConfig cfg = tiny_config();
    auto hrnn = std::make_shared<HrnnModel>(tiny_layout(), cfg, *store, 809);
    auto cnn = std::make_shared<CnnModel>(2, cfg, *store, 813);
    auto head = std::make_shared<FusionHead>(hrnn->feature_width() + cnn->feature_width(), cfg,
                                             *store, 819);
    std::vector<Tensor> inputs;
    inputs.push_back(random_input({2, 6, 2}, 909));
    inputs.push_back(random_input({2, 2, 8, 8}, 910));
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"fusion_branch",
         [store, hrnn, cnn, head, labels](Tape& t, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in.begin() + 2, in.end()));
           auto r = hrnn->forward(t, bind, in[0]);
           auto c = cnn->forward(t, bind, in[1], true);
           Var logits = head->forward(bind, concat_cols(r.feats, c.feats));
           Var loss = softmax_cross_entropy(logits, labels);
           loss = add(loss, scale(softmax_cross_entropy(r.logits, labels), 0.5));
           loss = add(loss, scale(softmax_cross_entropy(c.logits, labels), 0.5));
           return loss;
         },
         std::move(inputs)});
  }

  {  // domain head: only post-reversal parameters can match finite
     // differences, so the features stay a fixed constant here
    auto store = std::make_shared<ParamStore>();
    auto head = std::make_shared<DomainHead>(5, tiny_config(), *store, 31);
    std::vector<Tensor> inputs;
    for (Tensor& t : trainable_values(*store)) inputs.push_back(std::move(t));
    cases.push_back(
        {"domain_head",
         [store, head](Tape& t, const std::vector<Var>& in) {
           Bind bind(*store, std::vector<Var>(in));
           Var feats = t.constant(random_input({3, 5}, 8));
           Var logits = head->forward(bind, feats, 0.7);
           return softmax_cross_entropy(logits, {0, 1, 1});
         },
         std::move(inputs)});
  }

  return cases;
}

}  // namespace eegdual
