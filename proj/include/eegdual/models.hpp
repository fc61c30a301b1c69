#ifndef EEGDUAL_MODELS_HPP
#define EEGDUAL_MODELS_HPP

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "eegdual/gradcheck.hpp"
#include "eegdual/tape.hpp"
#include "eegdual/tensor.hpp"
#include "eegdual/topomap.hpp"

namespace eegdual {

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

struct ParamBlock {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Name-keyed parameter blocks in creation order. Addresses are stable, so
// layers keep plain Tensor* members into the store.
class ParamStore {
public:
  Tensor& add(std::string name, Tensor init, bool trainable = true);
  std::size_t size() const { return blocks_.size(); }
  ParamBlock& block(std::size_t i) { return blocks_[i]; }
  const ParamBlock& block(std::size_t i) const { return blocks_[i]; }
  int index_of(const Tensor* t) const;
  Tensor* find(const std::string& name);

  long parameter_count(const std::string& prefix = "", bool trainable_only = true) const;

  std::vector<std::pair<std::string, Tensor>> snapshot() const;
  // Strict by-name restore: unknown, missing or misshaped blocks are errors.
  void restore(const std::vector<std::pair<std::string, Tensor>>& blocks);
  std::vector<Tensor> values_copy() const;             // trainable blocks only
  void assign_values(const std::vector<Tensor>& vals); // trainable blocks only

private:
  std::deque<ParamBlock> blocks_;
  std::unordered_map<const Tensor*, int> index_;
};

// Per-forward binding of a store's trainable blocks onto a tape.
class Bind {
public:
  Bind(Tape& t, ParamStore& store, bool track);
  // Graph checks substitute externally supplied leaves for the store values.
  Bind(ParamStore& store, std::vector<Var> trainable_leaves);

  Var operator[](const Tensor& param) const;
  // After backward: gradients of trainable blocks, in store order.
  std::vector<const Tensor*> trainable_grads(const Tape& t) const;
  std::vector<Tensor*> trainable_values() const;

private:
  ParamStore* store_;
  std::vector<Var> vars_;  // indexed like store blocks; invalid for non-trainable
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct Dense {
  Tensor* w = nullptr;  // [in, out]
  Tensor* b = nullptr;  // [out]
  void init(ParamStore& store, const std::string& prefix, int in, int out, std::uint64_t seed);
  Var operator()(const Bind& bind, Var x) const;
};

// Gated recurrent cell. Gate order in the fused matrices: reset, update,
// candidate; new state h' = n + z * (h - n).
struct GruCell {
  Tensor* w_ih = nullptr;  // [in, 3H]
  Tensor* w_hh = nullptr;  // [H, 3H]
  Tensor* b_ih = nullptr;  // [3H]
  Tensor* b_hh = nullptr;  // [3H]
  int hidden = 0;
  void init(ParamStore& store, const std::string& prefix, int in, int hidden_size,
            std::uint64_t seed);
  Var step(const Bind& bind, Var x, Var h) const;
};

struct Conv {
  Tensor* kernels = nullptr;  // [Cout, Cin, k, k]
  Tensor* bias = nullptr;     // [Cout]; convs feeding batch norm carry none
  void init(ParamStore& store, const std::string& prefix, int cin, int cout, int k,
            std::uint64_t seed, bool with_bias = true);
  Var operator()(const Bind& bind, Var x, int stride, int pad) const;
};

struct BatchNorm {
  Tensor* gamma = nullptr;
  Tensor* beta = nullptr;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  Tensor* batches = nullptr;
  void init(ParamStore& store, const std::string& prefix, int channels);
  Var operator()(const Bind& bind, Var x, bool train) const;
};

// ---------------------------------------------------------------------------
// model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int classes = 4;
  int bands = 5;
  int hidden = 32;        // recurrent hidden size
  int image_size = 32;
  int cnn_width1 = 16;
  int cnn_width2 = 64;
  int cnn_width3 = 128;
  int caps_stem = 32;
  int caps_primary_types = 4;
  int caps_primary_dim = 8;
  int caps_class_dim = 16;
  int caps_routing_iters = 3;
  int fusion_hidden = 64;
  int domain_hidden = 32;
  double alpha = 0.5;     // output-fusion mixing weight
};

// ---------------------------------------------------------------------------
// branches
// ---------------------------------------------------------------------------

// Hierarchical recurrent branch. Electrode-level cells (one per region) run
// over that region's electrodes in layout order; the output at a region's
// last electrode is its summary. A region-level cell runs over summaries in
// region-index order; each hemisphere's summary is the mean of its member
// regions' region-level outputs (a region belongs to the hemisphere of the
// majority of its electrodes, midline on ties). A hemisphere-level cell runs
// over {left, right, midline}; its final state is the feature vector.
class HrnnModel {
public:
  HrnnModel(const ElectrodeLayout& layout, const ModelConfig& cfg, ParamStore& store,
            std::uint64_t seed, const std::string& prefix = "hrnn");

  struct Out {
    Var logits;                         // [B, classes]
    Var feats;                          // [B, hidden]
    std::vector<Var> region_summaries;  // electrode-level summary per region
  };
  Out forward(Tape& t, const Bind& bind, Var x) const;  // x: [B, channels, bands]

  int feature_width() const { return hidden_; }
  int channels() const { return channels_; }
  const std::vector<std::vector<int>>& region_electrodes() const { return region_electrodes_; }
  const std::array<std::vector<int>, 3>& hemisphere_regions() const { return hemisphere_regions_; }

private:
  int hidden_, classes_, bands_, channels_;
  std::vector<std::vector<int>> region_electrodes_;
  std::array<std::vector<int>, 3> hemisphere_regions_;  // left, right, midline
  std::vector<GruCell> electrode_cells_;
  GruCell region_cell_;
  GruCell hemi_cell_;
  Dense head_;
};

// VGG-style image branch: blocks of 4, 2 and 1 3x3 convolutions (stride 1,
// pad 1), each conv followed by batch norm and relu, blocks separated by 2x2
// max pooling, then global average pooling and a dense head.
class CnnModel {
public:
  CnnModel(int in_channels, const ModelConfig& cfg, ParamStore& store, std::uint64_t seed,
           const std::string& prefix = "cnn");

  struct Out {
    Var logits;  // [B, classes]
    Var feats;   // [B, width3]
  };
  Out forward(Tape& t, const Bind& bind, Var img, bool train) const;

  int feature_width() const { return width3_; }

private:
  struct ConvBn {
    Conv conv;
    BatchNorm bn;
  };
  int width3_, classes_;
  std::vector<ConvBn> block1_, block2_, block3_;
  Dense head_;
};

// Capsule image branch: conv stem, primary capsules from a strided
// convolution, class capsules coupled by dynamic routing. Class presence is
// the capsule length, bounded below 1 by the squash.
class CapsModel {
public:
  CapsModel(int in_channels, const ModelConfig& cfg, ParamStore& store, std::uint64_t seed,
            const std::string& prefix = "capsule");

  struct Out {
    Var lengths;  // [B, classes], each in (0, 1)
    Var logits;   // == lengths; capsule lengths are not calibrated logits
  };
  Out forward(Tape& t, const Bind& bind, Var img) const;

  int primary_capsules() const { return primary_count_; }

private:
  int classes_, types_, prim_dim_, class_dim_, iters_, image_size_, primary_count_;
  Conv stem_;
  Conv primary_;
  Tensor* predict_w_ = nullptr;  // [I, classes, prim_dim, class_dim]
};

// Margin loss for capsule lengths (m+ = 0.9, m- = 0.1, down-weight 0.5).
Var margin_loss(Var lengths, const std::vector<int>& labels, double m_pos = 0.9,
                double m_neg = 0.1, double neg_weight = 0.5);

// Dense head over concatenated branch features.
class FusionHead {
public:
  FusionHead(int in_width, const ModelConfig& cfg, ParamStore& store, std::uint64_t seed,
             const std::string& prefix = "fusion");
  Var forward(const Bind& bind, Var feats) const;

private:
  Dense hidden_, out_;
};

// Gradient-reversal layer followed by a 2-layer classifier over features;
// two domain logits (0 = training set, 1 = held-out set).
class DomainHead {
public:
  DomainHead(int in_width, const ModelConfig& cfg, ParamStore& store, std::uint64_t seed,
             const std::string& prefix = "domain");
  Var forward(const Bind& bind, Var feats, double lambda) const;

private:
  Dense hidden_, out_;
};

// alpha*a + (1-alpha)*b elementwise; alpha outside [0,1] is a config error.
Var output_fusion(Var logits_a, Var logits_b, double alpha);
Tensor output_fusion(const Tensor& a, const Tensor& b, double alpha);

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

// Per-sample gradient magnitude of the predicted-class pre-softmax score with
// respect to the input: |d score / d x|, shape equal to x_batch. The forward
// callback must build logits [B, C] for the given input leaf.
Tensor input_saliency(const std::function<Var(Tape&, Var)>& forward_logits,
                      const Tensor& x_batch);

// Count of saliency evaluations, for per-batch recomputation assertions.
long saliency_eval_count();
void reset_saliency_eval_count();

// Tiny end-to-end graphs (one per branch plus cells and heads) for the
// finite-difference battery.
std::vector<NamedGraphCase> model_gradcheck_cases();

}  // namespace eegdual

#endif
