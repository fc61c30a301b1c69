#include <cmath>
#include <map>

#include "doctest.h"
#include "eegdual/data_io.hpp"
#include "eegdual/errors.hpp"
#include "eegdual/models.hpp"
#include "eegdual/rng.hpp"

using namespace eegdual;

namespace {

std::string data_path(const char* rel) { return std::string(EEGDUAL_DATA_DIR) + "/" + rel; }

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  RngStream rng(seed, "models-test");
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

ElectrodeLayout three_region_layout() {
  ElectrodeLayout layout;
  auto put = [&layout](const char* lb, double x, double y, double z, int region, Hemisphere h) {
    Electrode e{lb, x, y, z, region, h};
    double n = std::sqrt(x * x + y * y + z * z);
    e.x /= n;
    e.y /= n;
    e.z /= n;
    layout.electrodes.push_back(e);
  };
  put("L0", -0.5, 0.4, 0.8, 0, Hemisphere::Left);
  put("L1", -0.6, 0.1, 0.8, 0, Hemisphere::Left);
  put("R0", 0.5, 0.4, 0.8, 1, Hemisphere::Right);
  put("R1", 0.6, 0.1, 0.8, 1, Hemisphere::Right);
  put("M0", 0.0, 0.6, 0.8, 2, Hemisphere::Midline);
  put("M1", 0.0, -0.6, 0.8, 2, Hemisphere::Midline);
  layout.region_count = 3;
  return layout;
}

ModelConfig small_config(int classes, int bands) {
  ModelConfig cfg;
  cfg.classes = classes;
  cfg.bands = bands;
  cfg.hidden = 8;
  cfg.image_size = 8;
  cfg.cnn_width1 = 4;
  cfg.cnn_width2 = 6;
  cfg.cnn_width3 = 8;
  cfg.caps_stem = 6;
  cfg.caps_primary_types = 2;
  cfg.caps_primary_dim = 4;
  cfg.caps_class_dim = 4;
  return cfg;
}

// ---- plain-loop reference implementations for the capsule oracle ----

Tensor naive_conv(const Tensor& x, const Tensor& k, const Tensor& bias, int stride, int pad) {
  int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += x.at(ci, iy, ix) * k.at(co, ci, ky, kx);
            }
        out.at(co, oy, ox) = acc;
      }
  return out;
}

void naive_squash_rows(std::vector<double>& v, int dim) {
  for (std::size_t r = 0; r < v.size() / static_cast<std::size_t>(dim); ++r) {
    double n2 = 0.0;
    for (int i = 0; i < dim; ++i) n2 += v[r * dim + i] * v[r * dim + i];
    double f = n2 > 0.0 ? std::sqrt(n2) / (1.0 + n2) : 0.0;
    for (int i = 0; i < dim; ++i) v[r * dim + i] *= f;
  }
}

// unrolled dynamic routing on one sample, straight from the algorithm
std::vector<double> naive_capsule_lengths(const Tensor& img, ParamStore& store, int stem_ch,
                                          int types, int prim_dim, int class_dim, int classes,
                                          int iters) {
  Tensor stem = naive_conv(img, *store.find("capsule.stem.kernels"),
                           *store.find("capsule.stem.bias"), 1, 1);
  for (std::size_t i = 0; i < stem.numel(); ++i) stem[i] = std::max(0.0, stem[i]);
  Tensor prim = naive_conv(stem, *store.find("capsule.primary.kernels"),
                           *store.find("capsule.primary.bias"), 2, 1);
  int H2 = prim.dim(1), W2 = prim.dim(2);
  int I = types * H2 * W2;
  std::vector<double> u(static_cast<std::size_t>(I) * prim_dim);
  for (int t = 0; t < types; ++t)
    for (int d = 0; d < prim_dim; ++d)
      for (int y = 0; y < H2; ++y)
        for (int x = 0; x < W2; ++x)
          u[static_cast<std::size_t>((t * H2 + y) * W2 + x) * prim_dim + d] =
              prim.at(t * prim_dim + d, y, x);
  naive_squash_rows(u, prim_dim);

  const Tensor& W = *store.find("capsule.predict_w");  // [I, C, d, e]
  std::vector<double> uhat(static_cast<std::size_t>(I) * classes * class_dim);
  for (int i = 0; i < I; ++i)
    for (int c = 0; c < classes; ++c)
      for (int e = 0; e < class_dim; ++e) {
        double acc = 0.0;
        for (int d = 0; d < prim_dim; ++d)
          acc += u[static_cast<std::size_t>(i) * prim_dim + d] * W.at(i, c, d, e);
        uhat[(static_cast<std::size_t>(i) * classes + c) * class_dim + e] = acc;
      }

  std::vector<double> b(static_cast<std::size_t>(I) * classes, 0.0);
  std::vector<double> v(static_cast<std::size_t>(classes) * class_dim, 0.0);
  for (int it = 0; it < iters; ++it) {
    std::fill(v.begin(), v.end(), 0.0);
    for (int i = 0; i < I; ++i) {
      double m = b[static_cast<std::size_t>(i) * classes];
      for (int c = 1; c < classes; ++c)
        m = std::max(m, b[static_cast<std::size_t>(i) * classes + c]);
      double z = 0.0;
      std::vector<double> cprob(static_cast<std::size_t>(classes));
      for (int c = 0; c < classes; ++c) {
        cprob[static_cast<std::size_t>(c)] =
            std::exp(b[static_cast<std::size_t>(i) * classes + c] - m);
        z += cprob[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < classes; ++c)
        for (int e = 0; e < class_dim; ++e)
          v[static_cast<std::size_t>(c) * class_dim + e] +=
              cprob[static_cast<std::size_t>(c)] / z *
              uhat[(static_cast<std::size_t>(i) * classes + c) * class_dim + e];
    }
    naive_squash_rows(v, class_dim);
    if (it + 1 < iters)
      for (int i = 0; i < I; ++i)
        for (int c = 0; c < classes; ++c) {
          double agree = 0.0;
          for (int e = 0; e < class_dim; ++e)
            agree += uhat[(static_cast<std::size_t>(i) * classes + c) * class_dim + e] *
                     v[static_cast<std::size_t>(c) * class_dim + e];
          b[static_cast<std::size_t>(i) * classes + c] += agree;
        }
  }
  std::vector<double> lengths(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    double n2 = 0.0;
    for (int e = 0; e < class_dim; ++e)
      n2 += v[static_cast<std::size_t>(c) * class_dim + e] *
            v[static_cast<std::size_t>(c) * class_dim + e];
    lengths[static_cast<std::size_t>(c)] = std::sqrt(n2);
  }
  return lengths;
}

}  // namespace

TEST_CASE("hrnn: shape contract, determinism, layout mismatch") {
  ElectrodeLayout layout = load_layout(data_path("layouts/seed62.layout"));
  ModelConfig cfg;
  cfg.classes = 4;
  cfg.bands = 5;
  cfg.hidden = 32;
  ParamStore store;
  HrnnModel model(layout, cfg, store, 42);

  Tensor x = random_tensor({4, 62, 5}, 1);
  Tape t1;
  Bind b1(t1, store, false);
  auto out1 = model.forward(t1, b1, t1.constant(x));
  CHECK(out1.logits.value().dim(0) == 4);
  CHECK(out1.logits.value().dim(1) == 4);
  CHECK(out1.feats.value().dim(1) == 32);
  CHECK(out1.logits.value().all_finite());

  Tape t2;
  Bind b2(t2, store, false);
  auto out2 = model.forward(t2, b2, t2.constant(x));
  CHECK(out1.logits.value().vec() == out2.logits.value().vec());  // deterministic

  Tape t3;
  Bind b3(t3, store, false);
  CHECK_THROWS_AS(model.forward(t3, b3, t3.constant(Tensor(Shape{4, 61, 5}))), DataError);
}

TEST_CASE("hrnn parameter census matches the closed form") {
  ElectrodeLayout layout = load_layout(data_path("layouts/seed62.layout"));
  ModelConfig cfg;
  cfg.classes = 4;
  cfg.bands = 5;
  cfg.hidden = 32;
  ParamStore store;
  HrnnModel model(layout, cfg, store, 42);

  auto gru_params = [](int in, int hidden) { return in * 3 * hidden + hidden * 3 * hidden + 6 * hidden; };
  long expected = 0;
  expected += 8L * gru_params(5, 32);   // one electrode-level cell per region
  expected += gru_params(32, 32);       // region level
  expected += gru_params(32, 32);       // hemisphere level
  expected += 32L * 4 + 4;              // dense head
  CHECK(store.parameter_count("hrnn.") == expected);
  CHECK(store.parameter_count("hrnn.") == 42756);  // regression constant
}

TEST_CASE("hrnn consumes electrodes in layout order; swapping regions moves the signal") {
  ElectrodeLayout base = three_region_layout();
  ElectrodeLayout swapped = base;
  std::swap(swapped.electrodes[1].region, swapped.electrodes[2].region);  // L1 <-> R0

  ModelConfig cfg = small_config(3, 2);
  ParamStore sa, sb;
  HrnnModel ma(base, cfg, sa, 7);
  HrnnModel mb(swapped, cfg, sb, 7);  // same seed: same per-name parameter draws

  Tensor x(Shape{1, 6, 2});
  x.at(0, 1, 0) = 4.0;  // only electrode index 1 carries signal
  x.at(0, 1, 1) = -4.0;

  Tape ta, tb;
  Bind ba(ta, sa, false), bb(tb, sb, false);
  auto oa = ma.forward(ta, ba, ta.constant(x));
  auto ob = mb.forward(tb, bb, tb.constant(x));

  // the hot electrode moved from region 0 to region 1
  CHECK(oa.region_summaries[0].value().vec() != ob.region_summaries[0].value().vec());
  CHECK(oa.region_summaries[1].value().vec() != ob.region_summaries[1].value().vec());
  // the untouched midline region sees identical inputs and identical weights
  CHECK(oa.region_summaries[2].value().vec() == ob.region_summaries[2].value().vec());
}

TEST_CASE("cnn: census, eval determinism, train/eval divergence, size checks") {
  ModelConfig cfg;
  cfg.classes = 4;
  cfg.bands = 5;
  ParamStore store;
  CnnModel model(5, cfg, store, 9);

  // batch-normalized convolutions carry no bias
  long expected = 0;
  expected += 16L * 5 * 9 + 3 * (16L * 16 * 9) + 4 * (2L * 16);
  expected += 64L * 16 * 9 + 64L * 64 * 9 + 2 * (2L * 64);
  expected += 128L * 64 * 9 + 2L * 128;
  expected += 128L * 4 + 4;
  CHECK(store.parameter_count("cnn.") == expected);
  CHECK(store.parameter_count("cnn.") == 128596);  // regression constant

  Tensor img = random_tensor({2, 5, 32, 32}, 2);
  Tape t1;
  Bind b1(t1, store, false);
  auto train_out = model.forward(t1, b1, t1.constant(img), true);
  CHECK(train_out.feats.value().dim(1) == 128);

  Tape t2, t3;
  Bind b2(t2, store, false), b3(t3, store, false);
  auto eval1 = model.forward(t2, b2, t2.constant(img), false);
  auto eval2 = model.forward(t3, b3, t3.constant(img), false);
  CHECK(eval1.logits.value().vec() == eval2.logits.value().vec());  // bit-identical
  // batch statistics differ from the (one-step) running statistics
  CHECK(train_out.logits.value().vec() != eval1.logits.value().vec());

  Tape t4;
  Bind b4(t4, store, false);
  CHECK_THROWS_AS(model.forward(t4, b4, t4.constant(Tensor(Shape{1, 5, 20, 20})), false),
                  DimensionError);
}

TEST_CASE("capsules: bounds, simplex, and the unrolled-routing oracle") {
  ModelConfig cfg = small_config(3, 2);
  ParamStore store;
  CapsModel model(2, cfg, store, 11);

  Tensor imgs = random_tensor({3, 2, 8, 8}, 3);
  Tape t;
  Bind bind(t, store, false);
  auto out = model.forward(t, bind, t.constant(imgs));
  REQUIRE(out.lengths.value().dim(0) == 3);
  REQUIRE(out.lengths.value().dim(1) == 3);
  for (std::size_t i = 0; i < out.lengths.value().numel(); ++i) {
    CHECK(out.lengths.value()[i] > 0.0);
    CHECK(out.lengths.value()[i] < 1.0);  // squash bound
  }

  for (int b = 0; b < 3; ++b) {
    Tensor one(Shape{2, 8, 8});
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) one.at(c, y, x) = imgs.at(b, c, y, x);
    auto lengths = naive_capsule_lengths(one, store, cfg.caps_stem, cfg.caps_primary_types,
                                         cfg.caps_primary_dim, cfg.caps_class_dim, 3,
                                         cfg.caps_routing_iters);
    for (int c = 0; c < 3; ++c)
      CHECK(out.lengths.value().at(b, c) == doctest::Approx(lengths[static_cast<std::size_t>(c)])
                                                .epsilon(1e-10));
  }
}

TEST_CASE("margin loss: perfect prediction costs nothing, mistakes cost") {
  Tape t;
  Tensor good(Shape{2, 3}, 0.05);
  good.at(0, 1) = 0.95;
  good.at(1, 2) = 0.95;
  CHECK(margin_loss(t.constant(good), {1, 2}).value()[0] == 0.0);

  Tensor bad(Shape{1, 3}, 0.95);
  Var loss = margin_loss(t.constant(bad), {0});
  CHECK(loss.value()[0] > 0.0);

  CHECK_THROWS_AS(margin_loss(t.constant(good), {1, 9}), DataError);
}

TEST_CASE("saliency of a linear surrogate equals the weight magnitudes exactly") {
  const int B = 3, F = 6, C = 4;
  Tensor W = random_tensor({F, C}, 5);
  auto forward = [&W](Tape& t, Var x) {
    return matmul(reshape(x, {x.value().dim(0), F}), t.constant(W));
  };
  Tensor x = random_tensor({B, 2, 3}, 6);
  Tensor sal = input_saliency(forward, x);
  REQUIRE(sal.shape() == Shape{B, 2, 3});

  // replicate the predicted class, then compare against |W| column by column
  for (int b = 0; b < B; ++b) {
    double best = -1e300;
    int pred = 0;
    for (int c = 0; c < C; ++c) {
      double v = 0.0;
      for (int f = 0; f < F; ++f) v += x[static_cast<std::size_t>(b) * F + f] * W.at(f, c);
      if (v > best) {
        best = v;
        pred = c;
      }
    }
    for (int f = 0; f < F; ++f)
      CHECK(sal[static_cast<std::size_t>(b) * F + f] == std::abs(W.at(f, pred)));
  }

  // saliency is non-negative and input-independent given the argmax class
  Tensor x2 = x;
  for (std::size_t i = 0; i < x2.numel(); ++i) x2[i] *= 0.5;  // argmax preserved (linear)
  Tensor sal2 = input_saliency(forward, x2);
  CHECK(sal.vec() == sal2.vec());
  for (std::size_t i = 0; i < sal.numel(); ++i) CHECK(sal[i] >= 0.0);
}

TEST_CASE("output fusion: endpoints bit-exact, convexity, validation") {
  Tensor a = random_tensor({4, 3}, 7), b = random_tensor({4, 3}, 8);
  CHECK(output_fusion(a, b, 1.0).vec() == a.vec());
  CHECK(output_fusion(a, b, 0.0).vec() == b.vec());
  Tensor same = output_fusion(a, a, 0.37);
  for (std::size_t i = 0; i < same.numel(); ++i)
    CHECK(same[i] == doctest::Approx(a[i]).epsilon(1e-15));
  CHECK_THROWS_AS(output_fusion(a, b, 1.5), ConfigError);
  CHECK_THROWS_AS(output_fusion(a, b, -0.1), ConfigError);

  Tape t;
  Var va = t.constant(a), vb = t.constant(b);
  CHECK(output_fusion(va, vb, 1.0).value().vec() == a.vec());
  CHECK(output_fusion(va, vb, 0.0).value().vec() == b.vec());
}

TEST_CASE("fusion head: width, zero weights give the uniform loss, permutation") {
  ModelConfig cfg = small_config(4, 2);
  ParamStore store;
  FusionHead head(10, cfg, store, 13);

  // zero every head parameter: logits collapse to zero = uniform softmax
  for (std::size_t i = 0; i < store.size(); ++i) store.block(i).value.fill(0.0);
  Tensor feats = random_tensor({5, 10}, 14);
  Tape t;
  Bind bind(t, store, false);
  Var logits = head.forward(bind, t.constant(feats));
  CHECK(logits.value().dim(1) == 4);
  Var loss = softmax_cross_entropy(logits, {0, 1, 2, 3, 0});
  CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("fusion head treats samples independently: permuting rows permutes logits") {
  ModelConfig cfg = small_config(3, 2);
  ParamStore store;
  FusionHead head(6, cfg, store, 15);
  Tensor feats = random_tensor({4, 6}, 16);
  Tensor permuted(Shape{4, 6});
  int perm[4] = {2, 0, 3, 1};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 6; ++c) permuted.at(r, c) = feats.at(perm[r], c);

  Tape t1, t2;
  Bind b1(t1, store, false), b2(t2, store, false);
  Tensor l1 = head.forward(b1, t1.constant(feats)).value();
  Tensor l2 = head.forward(b2, t2.constant(permuted)).value();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) CHECK(l2.at(r, c) == l1.at(perm[r], c));
}

TEST_CASE("domain head: lambda-independent forward, zero and negated gradients") {
  ModelConfig cfg = small_config(3, 2);
  ParamStore store;
  DomainHead head(5, cfg, store, 17);
  Tensor feats = random_tensor({4, 5}, 18);

  Tape t0, t1;
  Bind b0(t0, store, false), b1(t1, store, false);
  Tensor out0 = head.forward(b0, t0.constant(feats), 0.0).value();
  Tensor out1 = head.forward(b1, t1.constant(feats), 1.0).value();
  CHECK(out0.vec() == out1.vec());  // reversal is the identity forward

  {  // lambda = 0: no gradient reaches the features
    Tape t;
    Bind bind(t, store, false);
    Var x = t.leaf(feats, true);
    t.backward(softmax_cross_entropy(head.forward(bind, x, 0.0), {0, 1, 0, 1}));
    const Tensor& g = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
  }
  {  // lambda = 1: exact negation of the same head without the reversal
    Tape tr, tn;
    Bind br(tr, store, false), bn(tn, store, false);
    Var xr = tr.leaf(feats, true);
    tr.backward(softmax_cross_entropy(head.forward(br, xr, 1.0), {0, 1, 0, 1}));

    Var xn = tn.leaf(feats, true);
    Var hidden = relu(add_bias(matmul(xn, bn[*store.find("domain.hidden.w")]),
                               bn[*store.find("domain.hidden.b")]));
    Var logits = add_bias(matmul(hidden, bn[*store.find("domain.out.w")]),
                          bn[*store.find("domain.out.b")]);
    tn.backward(softmax_cross_entropy(logits, {0, 1, 0, 1}));

    const Tensor& gr = tr.grad(xr);
    const Tensor& gn = tn.grad(xn);
    bool nonzero = false;
    for (std::size_t i = 0; i < gr.numel(); ++i) {
      CHECK(gr[i] == -gn[i]);
      nonzero = nonzero || gr[i] != 0.0;
    }
    CHECK(nonzero);
  }
}
