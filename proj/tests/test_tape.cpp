#include <cmath>
#include <vector>

#include "doctest.h"
#include "eegdual/errors.hpp"
#include "eegdual/gradcheck.hpp"
#include "eegdual/rng.hpp"
#include "eegdual/tape.hpp"

using namespace eegdual;

namespace {

// independent triple-loop product, kept free of the Eigen-backed path
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c.at(i, j) += a.at(i, p) * b.at(p, j);
  return c;
}

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  RngStream rng(seed, "test-tensor");
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("matmul: identity, hand-expanded product, errors") {
  Tape t;
  Var I = t.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  Var B = t.constant(Tensor(Shape{2, 2}, {5, 6, 7, 8}));
  Var IB = matmul(I, B);
  CHECK(IB.value().vec() == B.value().vec());

  Var A = t.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  Var AB = matmul(A, B);
  CHECK(AB.value().vec() == std::vector<double>{19, 22, 43, 50});

  Var bad = t.constant(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(matmul(A, bad), DimensionError);
}

TEST_CASE("matmul agrees with the triple-loop oracle on random shapes") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream shp(seed, "shapes");
    int m = 1 + shp.below(6), k = 1 + shp.below(6), n = 1 + shp.below(6);
    Tensor a = random_tensor({m, k}, seed * 2 + 1);
    Tensor b = random_tensor({k, n}, seed * 2 + 2);
    Tape t;
    Tensor got = matmul(t.constant(a), t.constant(b)).value();
    Tensor want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.numel(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("grad of sum(a*b) matches finite differences") {
  double err = grad_check(
      [](Tape& t, const std::vector<Var>& in) { return sum_all(matmul(in[0], in[1])); },
      {random_tensor({3, 4}, 10), random_tensor({4, 2}, 11)});
  CHECK(err < 1e-4);
}

TEST_CASE("conv2d: identity kernel, all-ones kernel, shape arithmetic") {
  Tensor img = random_tensor({1, 1, 5, 5}, 20);
  Tape t;
  Var out = conv2d(t.constant(img), t.constant(Tensor(Shape{1, 1, 1, 1}, {1.0})), 1, 0);
  CHECK(out.value().vec() == img.vec());

  // 3x3 all-ones on constant input: interior pixels sum 9 copies
  Tensor c(Shape{1, 1, 6, 6}, 0.7);
  Tape t2;
  Var out2 = conv2d(t2.constant(c), t2.constant(Tensor(Shape{1, 1, 3, 3}, 1.0)), 1, 0);
  CHECK(out2.value().dim(2) == 4);
  for (std::size_t i = 0; i < out2.value().numel(); ++i)
    CHECK(out2.value()[i] == doctest::Approx(9 * 0.7));

  Tape t3;
  Var out3 = conv2d(t3.constant(Tensor(Shape{1, 1, 32, 32})),
                    t3.constant(Tensor(Shape{2, 1, 3, 3})), 1, 1);
  CHECK(out3.value().dim(2) == 32);
  CHECK(out3.value().dim(3) == 32);

  Tape t4;
  CHECK_THROWS_AS(conv2d(t4.constant(Tensor(Shape{1, 1, 2, 2})),
                         t4.constant(Tensor(Shape{1, 1, 5, 5})), 1, 0),
                  DimensionError);
}

TEST_CASE("conv2d matches a direct-summation oracle") {
  Tensor x = random_tensor({2, 3, 6, 6}, 21);
  Tensor k = random_tensor({4, 3, 3, 3}, 22);
  const int stride = 2, pad = 1;
  Tape t;
  Tensor got = conv2d(t.constant(x), t.constant(k), stride, pad).value();
  const int Ho = (6 + 2 * pad - 3) / stride + 1;
  for (int b = 0; b < 2; ++b)
    for (int co = 0; co < 4; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Ho; ++ox) {
          double acc = 0.0;
          for (int ci = 0; ci < 3; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                acc += x.at(b, ci, iy, ix) * k.at(co, ci, ky, kx);
              }
          CHECK(got.at(b, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("maxpool2d: values, ties, backward routing") {
  Tape t;
  Var c = maxpool2d(t.constant(Tensor(Shape{1, 1, 4, 4}, 3.25)), 2, 2);
  for (std::size_t i = 0; i < c.value().numel(); ++i) CHECK(c.value()[i] == 3.25);

  Tape t2;
  Var p = maxpool2d(t2.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
  CHECK(p.value()[0] == 4.0);

  // backward: 1.0 exactly at each window's argmax (first occurrence on ties)
  Tensor x = random_tensor({1, 2, 4, 4}, 23);
  x.at(0, 0, 0, 0) = x.at(0, 0, 0, 1) = 9.0;  // tie inside the first window
  Tape t3;
  Var leaf = t3.leaf(x, true);
  Var pooled = maxpool2d(leaf, 2, 2);
  t3.backward(sum_all(pooled));
  const Tensor& g = t3.grad(leaf);
  double total = 0.0;
  for (std::size_t i = 0; i < g.numel(); ++i) {
    CHECK((g[i] == 0.0 || g[i] == 1.0));
    total += g[i];
  }
  CHECK(total == 8.0);          // one unit per output cell
  CHECK(g.at(0, 0, 0, 0) == 1.0);  // tie resolved to the first occurrence
  CHECK(g.at(0, 0, 0, 1) == 0.0);

  Tape t4;
  CHECK_THROWS_AS(maxpool2d(t4.constant(Tensor(Shape{1, 1, 2, 2})), 3, 1), DimensionError);
}

TEST_CASE("batchnorm2d: normalization, constant channels, eval-state error") {
  // variance far above eps so the normalized variance sits within 1e-10 of 1
  Tensor x = random_tensor({4, 3, 5, 5}, 24);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] *= 1000.0;
  Tensor rm(Shape{3}), rv(Shape{3}, 1.0), seen(Shape{1});
  Tape t;
  Var y = batchnorm2d(t.constant(x), t.constant(Tensor(Shape{3}, 1.0)),
                      t.constant(Tensor(Shape{3})), true, rm, rv, seen);
  const int n = 4 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) mean += y.value().at(b, c, i, j);
    mean /= n;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          double d = y.value().at(b, c, i, j) - mean;
          var += d * d;
        }
    var /= n;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);
  }
  CHECK(seen[0] == 1.0);

  // constant channel normalizes to zero, then beta shifts it
  Tensor cx(Shape{2, 1, 3, 3}, 5.0);
  Tensor crm(Shape{1}), crv(Shape{1}, 1.0), cseen(Shape{1});
  Tape t2;
  Var cy = batchnorm2d(t2.constant(cx), t2.constant(Tensor(Shape{1}, 1.0)),
                       t2.constant(Tensor(Shape{1}, 0.25)), true, crm, crv, cseen);
  for (std::size_t i = 0; i < cy.value().numel(); ++i)
    CHECK(cy.value()[i] == doctest::Approx(0.25).epsilon(1e-9));

  // eval before any train batch is a state error
  Tensor erm(Shape{1}), erv(Shape{1}, 1.0), eseen(Shape{1});
  Tape t3;
  CHECK_THROWS_AS(batchnorm2d(t3.constant(cx), t3.constant(Tensor(Shape{1}, 1.0)),
                              t3.constant(Tensor(Shape{1})), false, erm, erv, eseen),
                  StateError);
}

TEST_CASE("activations: relu, sigmoid, tanh") {
  Tape t;
  Var r = relu(t.constant(Tensor(Shape{3}, {-1, 0, 2})));
  CHECK(r.value().vec() == std::vector<double>{0, 0, 2});
  Var s = sigmoid(t.constant(Tensor::scalar(0.0)));
  CHECK(s.value()[0] == 0.5);

  Tape t2;
  Var x = t2.leaf(Tensor::scalar(0.0), true);
  t2.backward(tanh_act(x));
  CHECK(t2.grad(x)[0] == 1.0);  // tanh'(0) = 1
}

TEST_CASE("squash: limit case, unit norm, bound") {
  Tape t;
  Var z = squash(t.constant(Tensor(Shape{1, 3})));
  for (std::size_t i = 0; i < z.value().numel(); ++i) CHECK(z.value()[i] == 0.0);

  // unit-norm input comes out at norm 1/2, same direction
  Tensor s(Shape{1, 3}, {1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)});
  Var q = squash(t.constant(s));
  double norm = 0.0;
  for (int i = 0; i < 3; ++i) norm += q.value()[i] * q.value()[i];
  CHECK(std::sqrt(norm) == doctest::Approx(0.5).epsilon(1e-12));
  for (int i = 0; i < 3; ++i) CHECK(q.value()[i] / s[i] > 0.0);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor v = random_tensor({4, 5}, 100 + seed);
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] *= 10.0;
    Tape tt;
    Tensor out = squash(tt.constant(v)).value();
    for (int r = 0; r < 4; ++r) {
      double n2 = 0.0;
      for (int c = 0; c < 5; ++c) n2 += out.at(r, c) * out.at(r, c);
      CHECK(std::sqrt(n2) < 1.0);
    }
  }
}

TEST_CASE("softmax cross entropy: symmetry, saturation, gradient, errors") {
  Tape t;
  Var uniform = softmax_cross_entropy(t.constant(Tensor(Shape{2, 4}, 0.3)), {0, 3});
  CHECK(uniform.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor margin(Shape{1, 3});
  margin.at(0, 1) = 50.0;
  Var sat = softmax_cross_entropy(t.constant(margin), {1});
  CHECK(sat.value()[0] < 1e-10);

  Tensor logits = random_tensor({3, 4}, 30);
  Tape t2;
  Var leaf = t2.leaf(logits, true);
  t2.backward(softmax_cross_entropy(leaf, {2, 0, 1}));
  Tensor probs;
  softmax_rows(logits, probs);
  const Tensor& g = t2.grad(leaf);
  std::vector<int> labels{2, 0, 1};
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 4; ++c) {
      double want = (probs.at(b, c) - (labels[static_cast<std::size_t>(b)] == c ? 1.0 : 0.0)) / 3.0;
      CHECK(g.at(b, c) == doctest::Approx(want).epsilon(1e-12));
    }

  Tape t3;
  CHECK_THROWS_AS(softmax_cross_entropy(t3.constant(Tensor(Shape{1, 3})), {3}), DataError);
  CHECK_THROWS_AS(softmax_cross_entropy(t3.constant(Tensor(Shape{1, 3})), {-1}), DataError);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  Tensor x = random_tensor({6, 7}, 31);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] *= 30.0;
  Tape t;
  Tensor p = softmax_lastdim(t.constant(x)).value();
  for (int r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += p.at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("grad_reverse: identity forward, zero and negated gradients") {
  Tensor x = random_tensor({3, 4}, 32);
  Tape t;
  Var leaf = t.constant(x);
  Var y = grad_reverse(leaf, 0.37);
  CHECK(y.value().vec() == x.vec());  // bit-identical

  {
    Tape tz;
    Var xin = tz.leaf(x, true);
    tz.backward(sum_all(mul(grad_reverse(xin, 0.0), grad_reverse(xin, 0.0))));
    const Tensor& g = tz.grad(xin);
    for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
  }
  {
    // lambda = 1: gradient is exactly the negation of the same graph without
    // the reversal layer
    Tape ta, tb;
    Var xa = ta.leaf(x, true);
    Var xb = tb.leaf(x, true);
    ta.backward(sum_all(mul(grad_reverse(xa, 1.0), ta.constant(random_tensor({3, 4}, 33)))));
    tb.backward(sum_all(mul(xb, tb.constant(random_tensor({3, 4}, 33)))));
    const Tensor& ga = ta.grad(xa);
    const Tensor& gb = tb.grad(xb);
    for (std::size_t i = 0; i < ga.numel(); ++i) CHECK(ga[i] == -gb[i]);
  }
  CHECK_THROWS_AS(grad_reverse(leaf, -0.5), ConfigError);
}

TEST_CASE("backward: basics, unused leaves, usage errors") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0), true);
  Var unused = t.leaf(Tensor(Shape{2, 2}, 1.0), true);
  t.backward(mul(x, x));
  CHECK(t.grad(x)[0] == 6.0);
  for (std::size_t i = 0; i < t.grad(unused).numel(); ++i) CHECK(t.grad(unused)[i] == 0.0);

  Tape t2;
  Var v = t2.leaf(Tensor(Shape{2}, {1, 2}), true);
  CHECK_THROWS_AS(t2.backward(v), UsageError);  // non-scalar loss

  Tape t3;
  Var s = t3.leaf(Tensor::scalar(1.0), true);
  Var loss = mul(s, s);
  t3.backward(loss);
  CHECK_THROWS_AS(t3.backward(loss), UsageError);       // consumed
  CHECK_THROWS_AS(mul(s, s), UsageError);               // no ops after consumption
}

TEST_CASE("grad_check: exact linear map, corrupted backward is caught") {
  double err = grad_check(
      [](Tape& t, const std::vector<Var>& in) {
        return sum_all(mul(in[0], t.constant(Tensor(Shape{2, 3}, 1.75))));
      },
      {random_tensor({2, 3}, 40)});
  CHECK(err < 1e-10);

  // a composite conv -> pool -> dense -> cross-entropy graph
  double composite = grad_check(
      [](Tape& t, const std::vector<Var>& in) {
        Var h = relu(conv2d(in[0], in[1], 1, 1));
        h = maxpool2d(h, 2, 2);
        h = reshape(h, {2, 3 * 3 * 3});
        return softmax_cross_entropy(add_bias(matmul(h, in[2]), in[3]), {0, 1});
      },
      {random_tensor({2, 2, 6, 6}, 41), random_tensor({3, 2, 3, 3}, 42),
       random_tensor({27, 2}, 43), random_tensor({2}, 44)});
  CHECK(composite < 1e-4);

  set_backward_fault_injection(true);
  double corrupted = grad_check(
      [](Tape& t, const std::vector<Var>& in) { return sum_all(relu(in[0])); },
      {Tensor(Shape{3, 3}, 0.5)});
  set_backward_fault_injection(false);
  CHECK(corrupted > 1e-2);
}

TEST_CASE("gradient battery: every op under 1e-4") {
  auto results = run_gradcheck_battery(1e-4);
  CHECK(results.size() >= 30);
  for (const auto& r : results) {
    INFO(r.name, " err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("primitive gradients match finite differences over 10 random seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream shp(seed, "prop-shapes");
    int m = 2 + shp.below(3), k = 2 + shp.below(3), n = 2 + shp.below(3);
    double e1 = grad_check(
        [](Tape& t, const std::vector<Var>& in) {
          return mean_all(mul(matmul(in[0], in[1]), matmul(in[0], in[1])));
        },
        {random_tensor({m, k}, 300 + seed), random_tensor({k, n}, 400 + seed)});
    CHECK(e1 < 1e-4);
    int hw = 4 + shp.below(3);
    double e2 = grad_check(
        [](Tape& t, const std::vector<Var>& in) {
          return mean_all(mul(conv2d(in[0], in[1], 1, 1), conv2d(in[0], in[1], 1, 1)));
        },
        {random_tensor({1, 2, hw, hw}, 500 + seed), random_tensor({2, 2, 3, 3}, 600 + seed)});
    CHECK(e2 < 1e-4);
    double e3 = grad_check(
        [](Tape& t, const std::vector<Var>& in) { return mean_all(squash(in[0])); },
        {random_tensor({3, 1 + static_cast<int>(seed % 5)}, 700 + seed)});
    CHECK(e3 < 1e-4);
  }
}
