#ifndef EEGDUAL_TAPE_HPP
#define EEGDUAL_TAPE_HPP

#include <functional>
#include <vector>

#include "eegdual/tensor.hpp"

namespace eegdual {

class Tape;

// Handle into the active tape. Cheap to copy; owns nothing.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const;
};


// Reverse-mode tape. Records one forward pass; backward() consumes it.
// A tape and the tensors enrolled in it belong to a single training step.
class Tape {
public:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;          // allocated lazily during backward
    bool track = false;   // gradient flows through this node
    bool leaf = false;
    bool grad_live = false;
    std::function<void(Tape&)> backprop;  // scatters this node's grad to inputs
  };

  // Enroll a value. track=true requests a gradient for this leaf.
  Var leaf(Tensor value, bool track);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Reverse sweep from a scalar loss. Populates grads of all tracked leaves
  // (zero when unreachable) and consumes the tape.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  // --- used by op implementations ---
  int push(const char* op, Tensor value, bool track, std::function<void(Tape&)> backprop);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  // Gradient accumulation buffer for node id, zero-allocated on first use.
  Tensor& grad_buf(int id);
  void check_open(const char* op) const;

private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool in_backward_ = false;
};

enum class Act { Relu, Sigmoid, Tanh };

// ---- elementwise / shape ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var activation(Act kind, Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var tanh_act(Var x);
Var reshape(Var x, Shape s);
Var concat_cols(Var a, Var b);            // [B,F1],[B,F2] -> [B,F1+F2]
Var concat_rows(Var a, Var b);            // [B1,F],[B2,F] -> [B1+B2,F]
Var slice_cols(Var x, int start, int len);  // [B,F] -> [B,len]
Var row_slice(Var x, int index);          // [B,S,F] -> [B,F] at axis-1 index
Var sum_all(Var x);                       // -> scalar
Var mean_all(Var x);                      // -> scalar
Var pick_sum(Var x, const std::vector<int>& cols);  // sum_b x[b, cols[b]] -> scalar

// ---- linear algebra / conv ----
Var matmul(Var a, Var b);                          // [m,k]x[k,n] -> [m,n]
Var add_bias(Var x, Var b);                        // [B,N] + [N]
Var conv2d(Var input, Var kernels, int stride, int padding);  // [B,Cin,H,W] or [Cin,H,W]
Var add_chan_bias(Var x, Var b);                   // [B,C,H,W] + [C]
Var maxpool2d(Var input, int window, int stride);
// Running statistics (mean, var, train-batch counter) are owned by the
// caller; train mode updates them with momentum 0.1, eval mode reads them
// and throws StateError while the counter is still zero. eps = 1e-5.
Var batchnorm2d(Var x, Var gamma, Var beta, bool train, Tensor& running_mean,
                Tensor& running_var, Tensor& batches_seen);
Var mean_hw(Var x);                                // [B,C,H,W] -> [B,C] (global average pool)

// ---- heads / losses ----
Var softmax_lastdim(Var x);
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);
Var grad_reverse(Var x, double lambda);

// ---- capsule primitives ----
Var squash(Var s);                         // squash over last dim; squash(0)=0
Var norm_lastdim(Var x);                   // vector lengths over last dim
Var caps_predict(Var u, Var w);            // [B,I,d],[I,C,d,e] -> [B,I,C,e]
Var caps_mix(Var c, Var uhat);             // [B,I,C],[B,I,C,e] -> [B,C,e]
Var caps_agree(Var uhat, Var v);           // [B,I,C,e],[B,C,e] -> [B,I,C]
Var caps_reshape(Var x, int vec_dim);      // [B,T*D,H,W] -> [B,T*H*W,D]

// Off-tape softmax, shared by evaluation code.
void softmax_rows(const Tensor& logits, Tensor& probs);

// Test hook: corrupt one backward rule (relu) to validate the checker.
void set_backward_fault_injection(bool on);
bool backward_fault_injection();

}  // namespace eegdual

#endif
