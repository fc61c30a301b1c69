#include "eegdual/adam.hpp"

#include <cmath>
#include <string>

#include "eegdual/errors.hpp"

namespace eegdual {

void adam_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state) {
  if (params.size() != grads.size())
    throw DimensionError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size())
    throw DimensionError("adam_step: state sized for a different parameter list");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    if (!p.same_shape(g) || !p.same_shape(m))
      throw DimensionError("adam_step: shape mismatch in parameter block " + std::to_string(k));
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps)) +
              state.lr * state.weight_decay * p[i];
    }
  }
}

}  // namespace eegdual
