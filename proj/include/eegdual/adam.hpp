#ifndef EEGDUAL_ADAM_HPP
#define EEGDUAL_ADAM_HPP

#include <vector>

#include "eegdual/tensor.hpp"

namespace eegdual {

// Adam with decoupled weight decay: p <- p - lr*(mhat/(sqrt(vhat)+eps)) - lr*wd*p.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-8;
  long t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// One optimizer step over a parameter list. Moment buffers are allocated on
// the first call; afterwards shapes must keep matching.
void adam_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state);

}  // namespace eegdual

#endif
