#include "eegdual/gradcheck.hpp"

#include <cmath>

#include "eegdual/errors.hpp"
#include "eegdual/models.hpp"
#include "eegdual/rng.hpp"

namespace eegdual {

namespace {

double forward_value(const GraphBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var out = build(tape, leaves);
  if (out.value().numel() != 1) throw UsageError("grad_check: graph output must be scalar");
  return out.value()[0];
}

}  // namespace

double grad_check(const GraphBuilder& build, std::vector<Tensor> inputs, double eps) {
  // analytic pass
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var out = build(tape, leaves);
    if (out.value().numel() != 1) throw UsageError("grad_check: graph output must be scalar");
    tape.backward(out);
    for (Var v : leaves) analytic.push_back(tape.grad(v));
  }
  // central differences
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      double up = forward_value(build, inputs);
      inputs[k][i] = saved - eps;
      double down = forward_value(build, inputs);
      inputs[k][i] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[k][i];
      double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape s, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

using BatteryCase = NamedGraphCase;

std::vector<BatteryCase> make_battery() {
  std::vector<BatteryCase> cases;
  RngStream rng(20240517, "gradcheck-battery");
  auto rnd = [&rng](Shape s) { return random_tensor(std::move(s), rng); };

  auto weighted_sum = [&rng](Tape& t, Var x) {
    // random fixed projection to a scalar keeps the check sensitive everywhere
    Tensor w(x.value().shape());
    RngStream wr(99, "gradcheck-proj", x.value().numel());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = wr.uniform(0.5, 1.5);
    return sum_all(mul(x, t.constant(std::move(w))));
  };

  cases.push_back({"add",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, add(in[0], in[1]));
                   },
                   {rnd({3, 4}), rnd({3, 4})}});
  cases.push_back({"sub",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, sub(in[0], in[1]));
                   },
                   {rnd({3, 4}), rnd({3, 4})}});
  cases.push_back({"mul",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, mul(in[0], in[1]));
                   },
                   {rnd({3, 4}), rnd({3, 4})}});
  cases.push_back({"scale",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, scale(in[0], -1.7));
                   },
                   {rnd({2, 5})}});
  cases.push_back({"add_scalar",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, add_scalar(in[0], 0.3));
                   },
                   {rnd({2, 5})}});
  {
    // keep relu inputs away from the kink
    Tensor x = rnd({4, 4});
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (std::abs(x[i]) < 0.05) x[i] = 0.1;
    cases.push_back({"relu",
                     [weighted_sum](Tape& t, const std::vector<Var>& in) {
                       return weighted_sum(t, relu(in[0]));
                     },
                     {x}});
  }
  cases.push_back({"sigmoid",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, sigmoid(in[0]));
                   },
                   {rnd({4, 4})}});
  cases.push_back({"tanh",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, tanh_act(in[0]));
                   },
                   {rnd({4, 4})}});
  cases.push_back({"matmul",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, matmul(in[0], in[1]));
                   },
                   {rnd({3, 4}), rnd({4, 5})}});
  cases.push_back({"add_bias",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, add_bias(in[0], in[1]));
                   },
                   {rnd({3, 4}), rnd({4})}});
  cases.push_back({"reshape",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, reshape(in[0], {4, 3}));
                   },
                   {rnd({3, 4})}});
  cases.push_back({"concat_cols",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, concat_cols(in[0], in[1]));
                   },
                   {rnd({3, 2}), rnd({3, 4})}});
  cases.push_back({"concat_rows",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, concat_rows(in[0], in[1]));
                   },
                   {rnd({2, 3}), rnd({4, 3})}});
  cases.push_back({"slice_cols",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, slice_cols(in[0], 1, 3));
                   },
                   {rnd({3, 6})}});
  cases.push_back({"row_slice",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, row_slice(in[0], 2));
                   },
                   {rnd({2, 4, 3})}});
  cases.push_back({"sum_all",
                   [](Tape&, const std::vector<Var>& in) { return sum_all(in[0]); },
                   {rnd({3, 3})}});
  cases.push_back({"mean_all",
                   [](Tape&, const std::vector<Var>& in) { return mean_all(in[0]); },
                   {rnd({3, 3})}});
  cases.push_back({"pick_sum",
                   [](Tape&, const std::vector<Var>& in) {
                     return pick_sum(in[0], {2, 0, 1});
                   },
                   {rnd({3, 4})}});
  cases.push_back({"conv2d",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, conv2d(in[0], in[1], 1, 1));
                   },
                   {rnd({2, 3, 5, 5}), rnd({4, 3, 3, 3})}});
  cases.push_back({"conv2d_strided",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, conv2d(in[0], in[1], 2, 0));
                   },
                   {rnd({2, 2, 6, 6}), rnd({3, 2, 2, 2})}});
  cases.push_back({"add_chan_bias",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, add_chan_bias(in[0], in[1]));
                   },
                   {rnd({2, 3, 4, 4}), rnd({3})}});
  cases.push_back({"maxpool2d",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, maxpool2d(in[0], 2, 2));
                   },
                   {rnd({2, 2, 6, 6})}});
  {
    BatteryCase bn;
    bn.name = "batchnorm2d_train";
    bn.inputs = {rnd({3, 2, 4, 4}), rnd({2}), rnd({2})};
    bn.build = [weighted_sum](Tape& t, const std::vector<Var>& in) {
      Tensor rm(Shape{2}), rv(Shape{2}, 1.0), seen(Shape{1});
      // a plain square of the output is invariant under the normalization,
      // leaving near-zero gradients; a nonlinearity keeps the check sharp
      Var y = batchnorm2d(in[0], in[1], in[2], true, rm, rv, seen);
      return weighted_sum(t, sigmoid(y));
    };
    cases.push_back(std::move(bn));
  }
  {
    BatteryCase bn;
    bn.name = "batchnorm2d_eval";
    bn.inputs = {rnd({3, 2, 4, 4}), rnd({2}), rnd({2})};
    bn.build = [](Tape& t, const std::vector<Var>& in) {
      Tensor rm(Shape{2}, 0.2), rv(Shape{2}, 1.3), seen(Shape{1}, 1.0);
      return mean_all(batchnorm2d(in[0], in[1], in[2], false, rm, rv, seen));
    };
    cases.push_back(std::move(bn));
  }
  cases.push_back({"mean_hw",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, mean_hw(in[0]));
                   },
                   {rnd({2, 3, 4, 4})}});
  cases.push_back({"softmax",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, softmax_lastdim(in[0]));
                   },
                   {rnd({3, 5})}});
  cases.push_back({"softmax_cross_entropy",
                   [](Tape&, const std::vector<Var>& in) {
                     return softmax_cross_entropy(in[0], {1, 0, 3});
                   },
                   {rnd({3, 4})}});
  cases.push_back({"grad_reverse",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     // a single reversal cannot match finite differences by
                     // construction; a 2.0/0.5 pair restores factor +1 while
                     // still exercising the scaled negation
                     Var y = grad_reverse(grad_reverse(in[0], 2.0), 0.5);
                     return weighted_sum(t, mul(y, y));
                   },
                   {rnd({3, 4})}});
  {
    Tensor s = rnd({4, 3});
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] += (s[i] >= 0 ? 0.3 : -0.3);
    cases.push_back({"squash",
                     [weighted_sum](Tape& t, const std::vector<Var>& in) {
                       return weighted_sum(t, squash(in[0]));
                     },
                     {s}});
    cases.push_back({"norm_lastdim",
                     [weighted_sum](Tape& t, const std::vector<Var>& in) {
                       return weighted_sum(t, norm_lastdim(in[0]));
                     },
                     {s}});
  }
  cases.push_back({"caps_predict",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, caps_predict(in[0], in[1]));
                   },
                   {rnd({2, 3, 4}), rnd({3, 2, 4, 5})}});
  cases.push_back({"caps_mix",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, caps_mix(in[0], in[1]));
                   },
                   {rnd({2, 3, 2}), rnd({2, 3, 2, 4})}});
  cases.push_back({"caps_agree",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, caps_agree(in[0], in[1]));
                   },
                   {rnd({2, 3, 2, 4}), rnd({2, 2, 4})}});
  cases.push_back({"caps_reshape",
                   [weighted_sum](Tape& t, const std::vector<Var>& in) {
                     return weighted_sum(t, caps_reshape(in[0], 4));
                   },
                   {rnd({2, 8, 3, 3})}});
  for (NamedGraphCase& c : model_gradcheck_cases()) cases.push_back(std::move(c));
  return cases;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_battery(double tolerance) {
  std::vector<GradCheckEntry> results;
  for (BatteryCase& c : make_battery()) {
    double err = grad_check(c.build, c.inputs);
    results.push_back({c.name, err, err < tolerance});
  }
  return results;
}

}  // namespace eegdual
