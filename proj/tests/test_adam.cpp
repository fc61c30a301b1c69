#include <cmath>

#include "doctest.h"
#include "eegdual/adam.hpp"
#include "eegdual/errors.hpp"

using namespace eegdual;

TEST_CASE("zero gradient and zero decay leave parameters unchanged") {
  Tensor p(Shape{3}, {0.5, -0.25, 2.0});
  Tensor g(Shape{3});
  AdamState st;
  st.weight_decay = 0.0;
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&g};
  adam_step(params, grads, st);
  CHECK(p.vec() == std::vector<double>{0.5, -0.25, 2.0});
  CHECK(st.t == 1);
}

TEST_CASE("first step matches the hand-evaluated update formula") {
  Tensor p(Shape{1}, {1.0});
  Tensor g(Shape{1}, {0.5});
  AdamState st;
  st.weight_decay = 0.0;
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&g};
  adam_step(params, grads, st);
  // mhat = g, vhat = g^2 after the first bias correction
  double expected = 1.0 - st.lr * (0.5 / (std::sqrt(0.25) + st.eps));
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-15));
  CHECK(p[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));  // ~ -lr*sign(g)
}

TEST_CASE("constant gradient drives the parameter strictly monotonically") {
  Tensor p(Shape{1}, {0.3});
  Tensor g(Shape{1}, {0.2});
  AdamState st;
  st.weight_decay = 0.0;
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&g};
  double prev = p[0];
  for (int i = 0; i < 5; ++i) {
    adam_step(params, grads, st);
    CHECK(p[0] < prev);
    prev = p[0];
  }
}

TEST_CASE("decoupled weight decay shrinks parameters even at zero gradient") {
  Tensor p(Shape{1}, {2.0});
  Tensor g(Shape{1});
  AdamState st;
  st.weight_decay = 0.1;
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&g};
  adam_step(params, grads, st);
  CHECK(p[0] == doctest::Approx(2.0 - st.lr * 0.1 * 2.0).epsilon(1e-12));
}

TEST_CASE("shape mismatches are dimension errors") {
  Tensor p(Shape{2});
  Tensor g(Shape{3});
  AdamState st;
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> grads{&g};
  CHECK_THROWS_AS(adam_step(params, grads, st), DimensionError);
}
