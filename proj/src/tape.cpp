#include "eegdual/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "eegdual/errors.hpp"

namespace eegdual {

namespace {

bool g_fault_injection = false;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

CMapM map2(const Tensor& t, int rows, int cols) { return CMapM(t.data(), rows, cols); }
MapM map2(Tensor& t, int rows, int cols) { return MapM(t.data(), rows, cols); }

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw DimensionError(std::string(op) + ": " + msg);
}

Tape* common_tape(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid()) throw UsageError(std::string(op) + ": invalid operand");
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands from different tapes");
  return a.tape;
}

}  // namespace

void set_backward_fault_injection(bool on) { g_fault_injection = on; }
bool backward_fault_injection() { return g_fault_injection; }

const Tensor& Var::value() const { return tape->value(*this); }
const Shape& Var::shape() const { return tape->value(*this).shape(); }

Var Tape::leaf(Tensor value, bool track) {
  check_open("leaf");
  nodes_.push_back(Node{"leaf", std::move(value), Tensor{}, track, true, false, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

int Tape::push(const char* op, Tensor value, bool track, std::function<void(Tape&)> backprop) {
  check_open(op);
  nodes_.push_back(Node{op, std::move(value), Tensor{}, track, false, false,
                        track ? std::move(backprop) : nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_open(const char* op) const {
  if (consumed_ && !in_backward_)
    throw UsageError(std::string(op) + ": tape already consumed by backward");
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.grad_live) throw UsageError("grad requested for a node backward never reached");
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.tape != this) throw UsageError("backward: loss not on this tape");
  if (consumed_) throw UsageError("backward: tape already consumed");
  if (value(loss).numel() != 1) throw UsageError("backward: loss must be scalar");
  consumed_ = true;
  in_backward_ = true;

  // Tracked leaves always end up with a populated grad, zero if unreachable.
  for (Node& n : nodes_)
    if (n.leaf && n.track && !n.grad_live) {
      n.grad = Tensor(n.value.shape());
      n.grad_live = true;
    }
  grad_buf(loss.id)[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.track || !n.grad_live || !n.backprop) continue;
    n.backprop(*this);
    if (!n.leaf) {
      n.backprop = nullptr;  // release saved intermediates
      if (id != loss.id) {
        n.grad = Tensor{};  // interior grads are no longer needed
        n.grad_live = false;
      }
    }
  }
  in_backward_ = false;
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
// ---------------------------------------------------------------------------

namespace {

Var binary_elementwise(const char* opname, Var a, Var b,
                       void (*fwd)(const Tensor&, const Tensor&, Tensor&),
                       void (*bwd)(Tape&, int, int, int)) {
  Tape* t = common_tape(opname, a, b);
  require(a.value().same_shape(b.value()), opname,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.value().shape());
  fwd(a.value(), b.value(), out);
  bool track = t->node(a.id).track || t->node(b.id).track;
  int ida = a.id, idb = b.id;
  int out_id = t->push(opname, std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, idb, bwd](Tape& tp) { bwd(tp, out_id, ida, idb); };
  }
  return Var{t, out_id};
}

}  // namespace

Var add(Var a, Var b) {
  return binary_elementwise(
      "add", a, b,
      [](const Tensor& x, const Tensor& y, Tensor& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) o[i] = x[i] + y[i];
      },
      [](Tape& tp, int out, int ia, int ib) {
        const Tensor& g = tp.node(out).grad;
        if (tp.node(ia).track) {
          Tensor& ga = tp.grad_buf(ia);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.node(ib).track) {
          Tensor& gb = tp.grad_buf(ib);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
      });
}

Var sub(Var a, Var b) {
  return binary_elementwise(
      "sub", a, b,
      [](const Tensor& x, const Tensor& y, Tensor& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) o[i] = x[i] - y[i];
      },
      [](Tape& tp, int out, int ia, int ib) {
        const Tensor& g = tp.node(out).grad;
        if (tp.node(ia).track) {
          Tensor& ga = tp.grad_buf(ia);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.node(ib).track) {
          Tensor& gb = tp.grad_buf(ib);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
      });
}

Var mul(Var a, Var b) {
  Tape* t = common_tape("mul", a, b);
  require(a.value().same_shape(b.value()), "mul", "shape mismatch");
  Tensor out(a.value().shape());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  bool track = t->node(a.id).track || t->node(b.id).track;
  int ida = a.id, idb = b.id;
  int out_id = t->push("mul", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, idb](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& xv = tp.node(ida).value;
      const Tensor& yv = tp.node(idb).value;
      if (tp.node(ida).track) {
        Tensor& ga = tp.grad_buf(ida);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * yv[i];
      }
      if (tp.node(idb).track) {
        Tensor& gb = tp.grad_buf(idb);
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * xv[i];
      }
    };
  }
  return Var{t, out_id};
}

Var scale(Var a, double c) {
  Tape* t = a.tape;
  Tensor out(a.value().shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * c;
  bool track = t->node(a.id).track;
  int ida = a.id;
  int out_id = t->push("scale", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, c](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& ga = tp.grad_buf(ida);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    };
  }
  return Var{t, out_id};
}

Var add_scalar(Var a, double c) {
  Tape* t = a.tape;
  Tensor out(a.value().shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + c;
  bool track = t->node(a.id).track;
  int ida = a.id;
  int out_id = t->push("add_scalar", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& ga = tp.grad_buf(ida);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  }
  return Var{t, out_id};
}

Var activation(Act kind, Var x) {
  switch (kind) {
    case Act::Relu: return relu(x);
    case Act::Sigmoid: return sigmoid(x);
    default: return tanh_act(x);
  }
}

Var relu(Var x) {
  Tape* t = x.tape;
  Tensor out(x.value().shape());
  const Tensor& v = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("relu", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& v = tp.node(idx).value;
      Tensor& gx = tp.grad_buf(idx);
      const double fault = g_fault_injection ? 1.05 : 1.0;
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (v[i] > 0.0) gx[i] += fault * g[i];
    };
  }
  return Var{t, out_id};
}

Var sigmoid(Var x) {
  Tape* t = x.tape;
  Tensor out(x.value().shape());
  const Tensor& v = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("sigmoid", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& s = tp.node(out_id).value;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
    };
  }
  return Var{t, out_id};
}

Var tanh_act(Var x) {
  Tape* t = x.tape;
  Tensor out(x.value().shape());
  const Tensor& v = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(v[i]);
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("tanh", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& s = tp.node(out_id).value;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (1.0 - s[i] * s[i]);
    };
  }
  return Var{t, out_id};
}

Var reshape(Var x, Shape s) {
  Tape* t = x.tape;
  Tensor out = x.value().reshaped(std::move(s));
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("reshape", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    };
  }
  return Var{t, out_id};
}

Var concat_cols(Var a, Var b) {
  Tape* t = common_tape("concat_cols", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.ndim() == 2 && y.ndim() == 2, "concat_cols", "expects 2-d inputs");
  require(x.dim(0) == y.dim(0), "concat_cols", "batch dims disagree");
  int B = x.dim(0), F1 = x.dim(1), F2 = y.dim(1);
  Tensor out(Shape{B, F1 + F2});
  for (int r = 0; r < B; ++r) {
    std::copy(x.data() + static_cast<std::size_t>(r) * F1,
              x.data() + static_cast<std::size_t>(r + 1) * F1,
              out.data() + static_cast<std::size_t>(r) * (F1 + F2));
    std::copy(y.data() + static_cast<std::size_t>(r) * F2,
              y.data() + static_cast<std::size_t>(r + 1) * F2,
              out.data() + static_cast<std::size_t>(r) * (F1 + F2) + F1);
  }
  bool track = t->node(a.id).track || t->node(b.id).track;
  int ida = a.id, idb = b.id;
  int out_id = t->push("concat_cols", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, idb, B, F1, F2](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      if (tp.node(ida).track) {
        Tensor& ga = tp.grad_buf(ida);
        for (int r = 0; r < B; ++r)
          for (int c = 0; c < F1; ++c)
            ga.at(r, c) += g[static_cast<std::size_t>(r) * (F1 + F2) + c];
      }
      if (tp.node(idb).track) {
        Tensor& gb = tp.grad_buf(idb);
        for (int r = 0; r < B; ++r)
          for (int c = 0; c < F2; ++c)
            gb.at(r, c) += g[static_cast<std::size_t>(r) * (F1 + F2) + F1 + c];
      }
    };
  }
  return Var{t, out_id};
}

Var concat_rows(Var a, Var b) {
  Tape* t = common_tape("concat_rows", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.ndim() == 2 && y.ndim() == 2, "concat_rows", "expects 2-d inputs");
  require(x.dim(1) == y.dim(1), "concat_rows", "widths disagree");
  int B1 = x.dim(0), B2 = y.dim(0), F = x.dim(1);
  Tensor out(Shape{B1 + B2, F});
  std::copy(x.data(), x.data() + x.numel(), out.data());
  std::copy(y.data(), y.data() + y.numel(), out.data() + x.numel());
  bool track = t->node(a.id).track || t->node(b.id).track;
  int ida = a.id, idb = b.id;
  std::size_t na = x.numel();  // before push: the node vector may reallocate
  int out_id = t->push("concat_rows", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, idb, na](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      if (tp.node(ida).track) {
        Tensor& ga = tp.grad_buf(ida);
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (tp.node(idb).track) {
        Tensor& gb = tp.grad_buf(idb);
        for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[na + i];
      }
    };
  }
  return Var{t, out_id};
}

Var slice_cols(Var x, int start, int len) {
  Tape* t = x.tape;
  const Tensor& v = x.value();
  require(v.ndim() == 2, "slice_cols", "expects 2-d input");
  require(start >= 0 && len > 0 && start + len <= v.dim(1), "slice_cols", "range out of bounds");
  int B = v.dim(0), F = v.dim(1);
  Tensor out(Shape{B, len});
  for (int r = 0; r < B; ++r)
    std::copy(v.data() + static_cast<std::size_t>(r) * F + start,
              v.data() + static_cast<std::size_t>(r) * F + start + len,
              out.data() + static_cast<std::size_t>(r) * len);
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("slice_cols", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, B, F, start, len](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      for (int r = 0; r < B; ++r)
        for (int c = 0; c < len; ++c)
          gx[static_cast<std::size_t>(r) * F + start + c] +=
              g[static_cast<std::size_t>(r) * len + c];
    };
  }
  return Var{t, out_id};
}

Var row_slice(Var x, int index) {
  Tape* t = x.tape;
  const Tensor& v = x.value();
  require(v.ndim() == 3, "row_slice", "expects 3-d input");
  require(index >= 0 && index < v.dim(1), "row_slice", "index out of bounds");
  int B = v.dim(0), S = v.dim(1), F = v.dim(2);
  Tensor out(Shape{B, F});
  for (int b = 0; b < B; ++b)
    std::copy(v.data() + (static_cast<std::size_t>(b) * S + index) * F,
              v.data() + (static_cast<std::size_t>(b) * S + index) * F + F,
              out.data() + static_cast<std::size_t>(b) * F);
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("row_slice", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, B, S, F, index](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f)
          gx[(static_cast<std::size_t>(b) * S + index) * F + f] +=
              g[static_cast<std::size_t>(b) * F + f];
    };
  }
  return Var{t, out_id};
}

Var sum_all(Var x) {
  Tape* t = x.tape;
  const Tensor& v = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) s += v[i];
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("sum_all", Tensor::scalar(s), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx](Tape& tp) {
      double g = tp.node(out_id).grad[0];
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    };
  }
  return Var{t, out_id};
}

Var mean_all(Var x) {
  double inv = 1.0 / static_cast<double>(x.value().numel());
  return scale(sum_all(x), inv);
}

Var pick_sum(Var x, const std::vector<int>& cols) {
  Tape* t = x.tape;
  const Tensor& v = x.value();
  require(v.ndim() == 2, "pick_sum", "expects 2-d input");
  require(static_cast<int>(cols.size()) == v.dim(0), "pick_sum", "one column per row required");
  int B = v.dim(0), C = v.dim(1);
  double s = 0.0;
  for (int b = 0; b < B; ++b) {
    if (cols[static_cast<std::size_t>(b)] < 0 || cols[static_cast<std::size_t>(b)] >= C)
      throw DataError("pick_sum: column index out of range");
    s += v.at(b, cols[static_cast<std::size_t>(b)]);
  }
  bool track = t->node(x.id).track;
  int idx = x.id;
  std::vector<int> cc = cols;
  int out_id = t->push("pick_sum", Tensor::scalar(s), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, cc = std::move(cc), C](Tape& tp) {
      double g = tp.node(out_id).grad[0];
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t b = 0; b < cc.size(); ++b)
        gx[b * static_cast<std::size_t>(C) + static_cast<std::size_t>(cc[b])] += g;
    };
  }
  return Var{t, out_id};
}

// ---------------------------------------------------------------------------
// linear algebra / conv
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape* t = common_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.ndim() == 2 && B.ndim() == 2, "matmul", "expects 2-d operands");
  require(A.dim(1) == B.dim(0), "matmul",
          "inner extents disagree: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out(Shape{m, n});
  map2(out, m, n).noalias() = map2(A, m, k) * map2(B, k, n);
  bool track = t->node(a.id).track || t->node(b.id).track;
  int ida = a.id, idb = b.id;
  int out_id = t->push("matmul", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, ida, idb, m, k, n](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& A = tp.node(ida).value;
      const Tensor& B = tp.node(idb).value;
      if (tp.node(ida).track)
        map2(tp.grad_buf(ida), m, k).noalias() += map2(g, m, n) * map2(B, k, n).transpose();
      if (tp.node(idb).track)
        map2(tp.grad_buf(idb), k, n).noalias() += map2(A, m, k).transpose() * map2(g, m, n);
    };
  }
  return Var{t, out_id};
}

Var add_bias(Var x, Var b) {
  Tape* t = common_tape("add_bias", x, b);
  const Tensor& X = x.value();
  const Tensor& Bv = b.value();
  require(X.ndim() == 2 && Bv.ndim() == 1, "add_bias", "expects [B,N] and [N]");
  require(X.dim(1) == Bv.dim(0), "add_bias", "bias width mismatch");
  int B = X.dim(0), N = X.dim(1);
  Tensor out(Shape{B, N});
  for (int r = 0; r < B; ++r)
    for (int c = 0; c < N; ++c) out.at(r, c) = X.at(r, c) + Bv[static_cast<std::size_t>(c)];
  bool track = t->node(x.id).track || t->node(b.id).track;
  int idx = x.id, idb = b.id;
  int out_id = t->push("add_bias", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, idb, B, N](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      if (tp.node(idx).track) {
        Tensor& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (tp.node(idb).track) {
        Tensor& gb = tp.grad_buf(idb);
        for (int r = 0; r < B; ++r)
          for (int c = 0; c < N; ++c) gb[static_cast<std::size_t>(c)] += g.at(r, c);
      }
    };
  }
  return Var{t, out_id};
}

namespace {

struct ConvDims {
  int B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad;
  int K() const { return Cin * kh * kw; }
  int P() const { return Ho * Wo; }
};

// cols is [K x B*P]; sample b occupies columns [b*P, (b+1)*P).
void im2col(const Tensor& input, const ConvDims& d, MatRM& cols) {
  cols.setZero(d.K(), static_cast<Eigen::Index>(d.B) * d.P());
  for (int b = 0; b < d.B; ++b) {
    for (int ci = 0; ci < d.Cin; ++ci) {
      const double* chan = input.data() +
          (static_cast<std::size_t>(b) * d.Cin + ci) * d.H * d.W;
      for (int ky = 0; ky < d.kh; ++ky)
        for (int kx = 0; kx < d.kw; ++kx) {
          int krow = (ci * d.kh + ky) * d.kw + kx;
          for (int oy = 0; oy < d.Ho; ++oy) {
            int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.H) continue;
            for (int ox = 0; ox < d.Wo; ++ox) {
              int ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.W) continue;
              cols(krow, static_cast<Eigen::Index>(b) * d.P() + oy * d.Wo + ox) =
                  chan[iy * d.W + ix];
            }
          }
        }
    }
  }
}

void col2im_accum(const MatRM& cols, const ConvDims& d, Tensor& dinput) {
  for (int b = 0; b < d.B; ++b) {
    for (int ci = 0; ci < d.Cin; ++ci) {
      double* chan = dinput.data() + (static_cast<std::size_t>(b) * d.Cin + ci) * d.H * d.W;
      for (int ky = 0; ky < d.kh; ++ky)
        for (int kx = 0; kx < d.kw; ++kx) {
          int krow = (ci * d.kh + ky) * d.kw + kx;
          for (int oy = 0; oy < d.Ho; ++oy) {
            int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.H) continue;
            for (int ox = 0; ox < d.Wo; ++ox) {
              int ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.W) continue;
              chan[iy * d.W + ix] +=
                  cols(krow, static_cast<Eigen::Index>(b) * d.P() + oy * d.Wo + ox);
            }
          }
        }
    }
  }
}

}  // namespace

Var conv2d(Var input, Var kernels, int stride, int padding) {
  Tape* t = common_tape("conv2d", input, kernels);
  const Tensor& X = input.value();
  const Tensor& Kv = kernels.value();
  require(Kv.ndim() == 4, "conv2d", "kernels must be [Cout,Cin,kh,kw]");
  require(X.ndim() == 3 || X.ndim() == 4, "conv2d", "input must be [Cin,H,W] or [B,Cin,H,W]");
  require(stride >= 1 && padding >= 0, "conv2d", "invalid stride/padding");
  const bool batched = X.ndim() == 4;

  ConvDims d{};
  d.B = batched ? X.dim(0) : 1;
  d.Cin = X.dim(batched ? 1 : 0);
  d.H = X.dim(batched ? 2 : 1);
  d.W = X.dim(batched ? 3 : 2);
  d.Cout = Kv.dim(0);
  d.kh = Kv.dim(2);
  d.kw = Kv.dim(3);
  d.stride = stride;
  d.pad = padding;
  require(Kv.dim(1) == d.Cin, "conv2d", "kernel channel count mismatch");
  require(d.kh <= d.H + 2 * padding && d.kw <= d.W + 2 * padding, "conv2d",
          "kernel larger than padded input");
  d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;
  require(d.Ho > 0 && d.Wo > 0, "conv2d", "non-positive output extent");

  MatRM cols;
  im2col(X, d, cols);
  MatRM out_all = map2(Kv, d.Cout, d.K()) * cols;  // [Cout x B*P]

  Tensor out(batched ? Shape{d.B, d.Cout, d.Ho, d.Wo} : Shape{d.Cout, d.Ho, d.Wo});
  for (int b = 0; b < d.B; ++b)
    for (int co = 0; co < d.Cout; ++co)
      for (int p = 0; p < d.P(); ++p)
        out[(static_cast<std::size_t>(b) * d.Cout + co) * d.P() + p] =
            out_all(co, static_cast<Eigen::Index>(b) * d.P() + p);

  bool track = t->node(input.id).track || t->node(kernels.id).track;
  int idx = input.id, idk = kernels.id;
  int out_id = t->push("conv2d", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, idk, d](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      MatRM g_all(d.Cout, static_cast<Eigen::Index>(d.B) * d.P());
      for (int b = 0; b < d.B; ++b)
        for (int co = 0; co < d.Cout; ++co)
          for (int p = 0; p < d.P(); ++p)
            g_all(co, static_cast<Eigen::Index>(b) * d.P() + p) =
                g[(static_cast<std::size_t>(b) * d.Cout + co) * d.P() + p];
      if (tp.node(idk).track) {
        MatRM cols;
        im2col(tp.node(idx).value, d, cols);  // recomputed; cheaper than retaining it
        map2(tp.grad_buf(idk), d.Cout, d.K()).noalias() += g_all * cols.transpose();
      }
      if (tp.node(idx).track) {
        const Tensor& Kv = tp.node(idk).value;
        MatRM dcols = map2(Kv, d.Cout, d.K()).transpose() * g_all;
        col2im_accum(dcols, d, tp.grad_buf(idx));
      }
    };
  }
  return Var{t, out_id};
}

Var add_chan_bias(Var x, Var b) {
  Tape* t = common_tape("add_chan_bias", x, b);
  const Tensor& X = x.value();
  const Tensor& Bv = b.value();
  require(X.ndim() == 4 && Bv.ndim() == 1, "add_chan_bias", "expects [B,C,H,W] and [C]");
  require(X.dim(1) == Bv.dim(0), "add_chan_bias", "channel count mismatch");
  int B = X.dim(0), C = X.dim(1);
  std::size_t hw = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out(X.shape());
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      std::size_t base = (static_cast<std::size_t>(bb) * C + c) * hw;
      double bias = Bv[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < hw; ++i) out[base + i] = X[base + i] + bias;
    }
  bool track = t->node(x.id).track || t->node(b.id).track;
  int idx = x.id, idb = b.id;
  int out_id = t->push("add_chan_bias", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, idb, B, C, hw](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      if (tp.node(idx).track) {
        Tensor& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (tp.node(idb).track) {
        Tensor& gb = tp.grad_buf(idb);
        for (int bb = 0; bb < B; ++bb)
          for (int c = 0; c < C; ++c) {
            std::size_t base = (static_cast<std::size_t>(bb) * C + c) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += g[base + i];
            gb[static_cast<std::size_t>(c)] += s;
          }
      }
    };
  }
  return Var{t, out_id};
}

Var maxpool2d(Var input, int window, int stride) {
  Tape* t = input.tape;
  const Tensor& X = input.value();
  require(X.ndim() == 4 || X.ndim() == 3, "maxpool2d", "input must be [B,C,H,W] or [C,H,W]");
  const bool batched = X.ndim() == 4;
  int B = batched ? X.dim(0) : 1;
  int C = X.dim(batched ? 1 : 0);
  int H = X.dim(batched ? 2 : 1);
  int W = X.dim(batched ? 3 : 2);
  if (window > H || window > W)
    throw DimensionError("maxpool2d: window larger than input");
  require(stride >= 1, "maxpool2d", "stride must be >= 1");
  int Ho = (H - window) / stride + 1;
  int Wo = (W - window) / stride + 1;

  Tensor out(batched ? Shape{B, C, Ho, Wo} : Shape{C, Ho, Wo});
  std::vector<int> argmax(out.numel());
  std::size_t oi = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* chan = X.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int best_at = 0;
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx) {
              int iy = oy * stride + ky, ix = ox * stride + kx;
              double v = chan[iy * W + ix];
              if (v > best) {  // strict: ties resolve to the first occurrence
                best = v;
                best_at = iy * W + ix;
              }
            }
          out[oi] = best;
          argmax[oi] = best_at;
        }
    }
  bool track = t->node(input.id).track;
  int idx = input.id;
  std::size_t chan_sz = static_cast<std::size_t>(H) * W;
  std::size_t out_chan_sz = static_cast<std::size_t>(Ho) * Wo;
  int out_id = t->push("maxpool2d", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, argmax = std::move(argmax), B, C, chan_sz,
                                out_chan_sz](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      std::size_t oi = 0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(b) * C + c) * chan_sz;
          for (std::size_t p = 0; p < out_chan_sz; ++p, ++oi)
            gx[base + static_cast<std::size_t>(argmax[oi])] += g[oi];
        }
    };
  }
  return Var{t, out_id};
}

Var batchnorm2d(Var x, Var gamma, Var beta, bool train, Tensor& running_mean,
                Tensor& running_var, Tensor& batches_seen) {
  constexpr double kEps = 1e-5;
  constexpr double kMomentum = 0.1;
  Tape* t = common_tape("batchnorm2d", x, gamma);
  common_tape("batchnorm2d", x, beta);
  const Tensor& X = x.value();
  require(X.ndim() == 4, "batchnorm2d", "input must be [B,C,H,W]");
  int B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  require(gamma.value().ndim() == 1 && gamma.value().dim(0) == C, "batchnorm2d", "gamma shape");
  require(beta.value().ndim() == 1 && beta.value().dim(0) == C, "batchnorm2d", "beta shape");
  require(running_mean.ndim() == 1 && running_mean.dim(0) == C && running_var.dim(0) == C,
          "batchnorm2d", "running stats shape");
  std::size_t hw = static_cast<std::size_t>(H) * W;
  std::size_t n = static_cast<std::size_t>(B) * hw;

  std::vector<double> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (train) {
    if (n < 2) throw DimensionError("batchnorm2d: train mode needs >= 2 values per channel");
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = X.data() + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      double mu = s / static_cast<double>(n);
      double sv = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = X.data() + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          double d = p[i] - mu;
          sv += d * d;
        }
      }
      double var = sv / static_cast<double>(n);
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + kEps);
      running_mean[static_cast<std::size_t>(c)] =
          (1.0 - kMomentum) * running_mean[static_cast<std::size_t>(c)] + kMomentum * mu;
      running_var[static_cast<std::size_t>(c)] =
          (1.0 - kMomentum) * running_var[static_cast<std::size_t>(c)] + kMomentum * var;
    }
    batches_seen[0] += 1.0;
  } else {
    if (batches_seen[0] < 1.0)
      throw StateError("batchnorm2d: eval mode before any train-mode batch");
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] =
          1.0 / std::sqrt(running_var[static_cast<std::size_t>(c)] + kEps);
    }
  }

  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  Tensor out(X.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
      double mu = mean[static_cast<std::size_t>(c)];
      double is = invstd[static_cast<std::size_t>(c)];
      double ga = G[static_cast<std::size_t>(c)], be = Bt[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < hw; ++i) out[base + i] = ga * (X[base + i] - mu) * is + be;
    }

  bool track = t->node(x.id).track || t->node(gamma.id).track || t->node(beta.id).track;
  int idx = x.id, idg = gamma.id, idb = beta.id;
  int out_id = t->push("batchnorm2d", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, idg, idb, mean = std::move(mean),
                                invstd = std::move(invstd), train, B, C, hw, n](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& X = tp.node(idx).value;
      const Tensor& G = tp.node(idg).value;
      for (int c = 0; c < C; ++c) {
        double mu = mean[static_cast<std::size_t>(c)];
        double is = invstd[static_cast<std::size_t>(c)];
        double ga = G[static_cast<std::size_t>(c)];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int b = 0; b < B; ++b) {
          std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            double xhat = (X[base + i] - mu) * is;
            sum_dy += g[base + i];
            sum_dy_xhat += g[base + i] * xhat;
          }
        }
        if (tp.node(idg).track) tp.grad_buf(idg)[static_cast<std::size_t>(c)] += sum_dy_xhat;
        if (tp.node(idb).track) tp.grad_buf(idb)[static_cast<std::size_t>(c)] += sum_dy;
        if (tp.node(idx).track) {
          Tensor& gx = tp.grad_buf(idx);
          if (train) {
            double invn = 1.0 / static_cast<double>(n);
            for (int b = 0; b < B; ++b) {
              std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                double xhat = (X[base + i] - mu) * is;
                gx[base + i] +=
                    ga * is * (g[base + i] - invn * sum_dy - invn * xhat * sum_dy_xhat);
              }
            }
          } else {
            for (int b = 0; b < B; ++b) {
              std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) gx[base + i] += ga * is * g[base + i];
            }
          }
        }
      }
    };
  }
  return Var{t, out_id};
}

Var mean_hw(Var x) {
  Tape* t = x.tape;
  const Tensor& X = x.value();
  require(X.ndim() == 4, "mean_hw", "input must be [B,C,H,W]");
  int B = X.dim(0), C = X.dim(1);
  std::size_t hw = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out(Shape{B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += X[base + i];
      out.at(b, c) = s / static_cast<double>(hw);
    }
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("mean_hw", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, B, C, hw](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      double inv = 1.0 / static_cast<double>(hw);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
          double gv = g.at(b, c) * inv;
          for (std::size_t i = 0; i < hw; ++i) gx[base + i] += gv;
        }
    };
  }
  return Var{t, out_id};
}

// ---------------------------------------------------------------------------
// heads / losses
// ---------------------------------------------------------------------------

void softmax_rows(const Tensor& logits, Tensor& probs) {
  int B = logits.dim(0), C = logits.dim(1);
  probs = Tensor(logits.shape());
  for (int b = 0; b < B; ++b) {
    double m = logits.at(b, 0);
    for (int c = 1; c < C; ++c) m = std::max(m, logits.at(b, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(logits.at(b, c) - m);
    for (int c = 0; c < C; ++c) probs.at(b, c) = std::exp(logits.at(b, c) - m) / z;
  }
}

Var softmax_lastdim(Var x) {
  Tape* t = x.tape;
  const Tensor& X = x.value();
  require(X.ndim() >= 1, "softmax_lastdim", "needs at least one axis");
  int C = X.dim(X.ndim() - 1);
  std::size_t rows = X.numel() / static_cast<std::size_t>(C);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data() + r * static_cast<std::size_t>(C);
    double* o = out.data() + r * static_cast<std::size_t>(C);
    double m = in[0];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c]);
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      o[c] = std::exp(in[c] - m);
      z += o[c];
    }
    for (int c = 0; c < C; ++c) o[c] /= z;
  }
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("softmax", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, rows, C](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& p = tp.node(out_id).value;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t r = 0; r < rows; ++r) {
        std::size_t base = r * static_cast<std::size_t>(C);
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += g[base + c] * p[base + c];
        for (int c = 0; c < C; ++c) gx[base + c] += p[base + c] * (g[base + c] - dot);
      }
    };
  }
  return Var{t, out_id};
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape* t = logits.tape;
  const Tensor& X = logits.value();
  require(X.ndim() == 2, "softmax_cross_entropy", "logits must be [B,C]");
  int B = X.dim(0), C = X.dim(1);
  require(static_cast<int>(labels.size()) == B, "softmax_cross_entropy", "one label per row");
  for (int lb : labels)
    if (lb < 0 || lb >= C)
      throw DataError("softmax_cross_entropy: label " + std::to_string(lb) +
                      " outside [0, " + std::to_string(C) + ")");
  Tensor probs;
  softmax_rows(X, probs);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    double m = X.at(b, 0);
    for (int c = 1; c < C; ++c) m = std::max(m, X.at(b, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(X.at(b, c) - m);
    loss += std::log(z) - (X.at(b, labels[static_cast<std::size_t>(b)]) - m);
  }
  loss /= static_cast<double>(B);
  bool track = t->node(logits.id).track;
  int idx = logits.id;
  std::vector<int> lab = labels;
  int out_id = t->push("softmax_cross_entropy", Tensor::scalar(loss), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, probs = std::move(probs),
                                lab = std::move(lab), B, C](Tape& tp) {
      double g = tp.node(out_id).grad[0] / static_cast<double>(B);
      Tensor& gx = tp.grad_buf(idx);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          double onehot = (c == lab[static_cast<std::size_t>(b)]) ? 1.0 : 0.0;
          gx.at(b, c) += g * (probs.at(b, c) - onehot);
        }
    };
  }
  return Var{t, out_id};
}

Var grad_reverse(Var x, double lambda) {
  if (lambda < 0.0) throw ConfigError("grad_reverse: lambda must be >= 0");
  Tape* t = x.tape;
  Tensor out = x.value();  // forward is the identity, bit for bit
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("grad_reverse", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, lambda](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += -lambda * g[i];
    };
  }
  return Var{t, out_id};
}

// ---------------------------------------------------------------------------
// capsule primitives
// ---------------------------------------------------------------------------

Var squash(Var s) {
  Tape* t = s.tape;
  const Tensor& X = s.value();
  require(X.ndim() >= 1, "squash", "needs at least one axis");
  int d = X.dim(X.ndim() - 1);
  std::size_t rows = X.numel() / static_cast<std::size_t>(d);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data() + r * static_cast<std::size_t>(d);
    double* o = out.data() + r * static_cast<std::size_t>(d);
    double n2 = 0.0;
    for (int i = 0; i < d; ++i) n2 += in[i] * in[i];
    double n = std::sqrt(n2);
    double f = n2 > 0.0 ? n / (1.0 + n2) : 0.0;  // ||out|| = n^2/(1+n^2); 0 maps to 0
    for (int i = 0; i < d; ++i) o[i] = f * in[i];
  }
  bool track = t->node(s.id).track;
  int idx = s.id;
  int out_id = t->push("squash", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, rows, d](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& X = tp.node(idx).value;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t r = 0; r < rows; ++r) {
        std::size_t base = r * static_cast<std::size_t>(d);
        double n2 = 0.0, sdotg = 0.0;
        for (int i = 0; i < d; ++i) {
          n2 += X[base + i] * X[base + i];
          sdotg += X[base + i] * g[base + i];
        }
        if (n2 < 1e-300) continue;  // zero vector: gradient is exactly zero in the limit
        double n = std::sqrt(n2);
        double denom = 1.0 + n2;
        double f = n / denom;                              // d out_i/d s_i diagonal part
        double fp = (1.0 - n2) / (denom * denom);          // f'(n)
        double coef = fp / n * sdotg;
        for (int i = 0; i < d; ++i) gx[base + i] += f * g[base + i] + coef * X[base + i];
      }
    };
  }
  return Var{t, out_id};
}

Var norm_lastdim(Var x) {
  Tape* t = x.tape;
  const Tensor& X = x.value();
  require(X.ndim() >= 2, "norm_lastdim", "needs at least two axes");
  int d = X.dim(X.ndim() - 1);
  std::size_t rows = X.numel() / static_cast<std::size_t>(d);
  Shape oshape(X.shape().begin(), X.shape().end() - 1);
  Tensor out(oshape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = X.data() + r * static_cast<std::size_t>(d);
    double n2 = 0.0;
    for (int i = 0; i < d; ++i) n2 += in[i] * in[i];
    out[r] = std::sqrt(n2);
  }
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("norm_lastdim", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, rows, d](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& vals = tp.node(out_id).value;
      const Tensor& X = tp.node(idx).value;
      Tensor& gx = tp.grad_buf(idx);
      for (std::size_t r = 0; r < rows; ++r) {
        double n = vals[r];
        if (n < 1e-300) continue;
        double gv = g[r] / n;
        std::size_t base = r * static_cast<std::size_t>(d);
        for (int i = 0; i < d; ++i) gx[base + i] += gv * X[base + i];
      }
    };
  }
  return Var{t, out_id};
}

Var caps_predict(Var u, Var w) {
  Tape* t = common_tape("caps_predict", u, w);
  const Tensor& U = u.value();
  const Tensor& W = w.value();
  require(U.ndim() == 3 && W.ndim() == 4, "caps_predict", "expects [B,I,d] and [I,C,d,e]");
  require(U.dim(1) == W.dim(0) && U.dim(2) == W.dim(2), "caps_predict", "shape mismatch");
  int B = U.dim(0), I = U.dim(1), d = U.dim(2), C = W.dim(1), e = W.dim(3);
  Tensor out(Shape{B, I, C, e});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < I; ++i) {
      const double* uv = U.data() + (static_cast<std::size_t>(b) * I + i) * d;
      for (int c = 0; c < C; ++c) {
        const double* wm = W.data() + ((static_cast<std::size_t>(i) * C + c) * d) * e;
        double* o = out.data() + ((static_cast<std::size_t>(b) * I + i) * C + c) * e;
        for (int k = 0; k < e; ++k) {
          double s = 0.0;
          for (int j = 0; j < d; ++j) s += uv[j] * wm[static_cast<std::size_t>(j) * e + k];
          o[k] = s;
        }
      }
    }
  bool track = t->node(u.id).track || t->node(w.id).track;
  int idu = u.id, idw = w.id;
  int out_id = t->push("caps_predict", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idu, idw, B, I, d, C, e](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& U = tp.node(idu).value;
      const Tensor& W = tp.node(idw).value;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < I; ++i) {
          const double* uv = U.data() + (static_cast<std::size_t>(b) * I + i) * d;
          for (int c = 0; c < C; ++c) {
            const double* gv = g.data() + ((static_cast<std::size_t>(b) * I + i) * C + c) * e;
            const double* wm = W.data() + ((static_cast<std::size_t>(i) * C + c) * d) * e;
            if (tp.node(idu).track) {
              double* gu = tp.grad_buf(idu).data() + (static_cast<std::size_t>(b) * I + i) * d;
              for (int j = 0; j < d; ++j) {
                double s = 0.0;
                for (int k = 0; k < e; ++k) s += gv[k] * wm[static_cast<std::size_t>(j) * e + k];
                gu[j] += s;
              }
            }
            if (tp.node(idw).track) {
              double* gw =
                  tp.grad_buf(idw).data() + ((static_cast<std::size_t>(i) * C + c) * d) * e;
              for (int j = 0; j < d; ++j)
                for (int k = 0; k < e; ++k)
                  gw[static_cast<std::size_t>(j) * e + k] += uv[j] * gv[k];
            }
          }
        }
    };
  }
  return Var{t, out_id};
}

Var caps_mix(Var c, Var uhat) {
  Tape* t = common_tape("caps_mix", c, uhat);
  const Tensor& Cv = c.value();
  const Tensor& U = uhat.value();
  require(Cv.ndim() == 3 && U.ndim() == 4, "caps_mix", "expects [B,I,C] and [B,I,C,e]");
  require(Cv.dim(0) == U.dim(0) && Cv.dim(1) == U.dim(1) && Cv.dim(2) == U.dim(2), "caps_mix",
          "shape mismatch");
  int B = Cv.dim(0), I = Cv.dim(1), C = Cv.dim(2), e = U.dim(3);
  Tensor out(Shape{B, C, e});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < I; ++i)
      for (int j = 0; j < C; ++j) {
        double cij = Cv[(static_cast<std::size_t>(b) * I + i) * C + j];
        const double* uv = U.data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
        double* o = out.data() + (static_cast<std::size_t>(b) * C + j) * e;
        for (int k = 0; k < e; ++k) o[k] += cij * uv[k];
      }
  bool track = t->node(c.id).track || t->node(uhat.id).track;
  int idc = c.id, idu = uhat.id;
  int out_id = t->push("caps_mix", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idc, idu, B, I, C, e](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& Cv = tp.node(idc).value;
      const Tensor& U = tp.node(idu).value;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < I; ++i)
          for (int j = 0; j < C; ++j) {
            const double* gv = g.data() + (static_cast<std::size_t>(b) * C + j) * e;
            const double* uv = U.data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
            if (tp.node(idc).track) {
              double s = 0.0;
              for (int k = 0; k < e; ++k) s += gv[k] * uv[k];
              tp.grad_buf(idc)[(static_cast<std::size_t>(b) * I + i) * C + j] += s;
            }
            if (tp.node(idu).track) {
              double cij = Cv[(static_cast<std::size_t>(b) * I + i) * C + j];
              double* gu =
                  tp.grad_buf(idu).data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
              for (int k = 0; k < e; ++k) gu[k] += cij * gv[k];
            }
          }
    };
  }
  return Var{t, out_id};
}

Var caps_agree(Var uhat, Var v) {
  Tape* t = common_tape("caps_agree", uhat, v);
  const Tensor& U = uhat.value();
  const Tensor& V = v.value();
  require(U.ndim() == 4 && V.ndim() == 3, "caps_agree", "expects [B,I,C,e] and [B,C,e]");
  require(U.dim(0) == V.dim(0) && U.dim(2) == V.dim(1) && U.dim(3) == V.dim(2), "caps_agree",
          "shape mismatch");
  int B = U.dim(0), I = U.dim(1), C = U.dim(2), e = U.dim(3);
  Tensor out(Shape{B, I, C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < I; ++i)
      for (int j = 0; j < C; ++j) {
        const double* uv = U.data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
        const double* vv = V.data() + (static_cast<std::size_t>(b) * C + j) * e;
        double s = 0.0;
        for (int k = 0; k < e; ++k) s += uv[k] * vv[k];
        out[(static_cast<std::size_t>(b) * I + i) * C + j] = s;
      }
  bool track = t->node(uhat.id).track || t->node(v.id).track;
  int idu = uhat.id, idv = v.id;
  int out_id = t->push("caps_agree", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idu, idv, B, I, C, e](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      const Tensor& U = tp.node(idu).value;
      const Tensor& V = tp.node(idv).value;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < I; ++i)
          for (int j = 0; j < C; ++j) {
            double gs = g[(static_cast<std::size_t>(b) * I + i) * C + j];
            const double* uv = U.data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
            const double* vv = V.data() + (static_cast<std::size_t>(b) * C + j) * e;
            if (tp.node(idu).track) {
              double* gu =
                  tp.grad_buf(idu).data() + ((static_cast<std::size_t>(b) * I + i) * C + j) * e;
              for (int k = 0; k < e; ++k) gu[k] += gs * vv[k];
            }
            if (tp.node(idv).track) {
              double* gv = tp.grad_buf(idv).data() + (static_cast<std::size_t>(b) * C + j) * e;
              for (int k = 0; k < e; ++k) gv[k] += gs * uv[k];
            }
          }
    };
  }
  return Var{t, out_id};
}

Var caps_reshape(Var x, int vec_dim) {
  Tape* t = x.tape;
  const Tensor& X = x.value();
  require(X.ndim() == 4, "caps_reshape", "expects [B,T*D,H,W]");
  int B = X.dim(0), ch = X.dim(1), H = X.dim(2), W = X.dim(3);
  require(vec_dim > 0 && ch % vec_dim == 0, "caps_reshape", "channels not divisible by vec_dim");
  int T = ch / vec_dim;
  int I = T * H * W;
  Tensor out(Shape{B, I, vec_dim});
  for (int b = 0; b < B; ++b)
    for (int tt = 0; tt < T; ++tt)
      for (int dd = 0; dd < vec_dim; ++dd)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            std::size_t src =
                ((static_cast<std::size_t>(b) * ch + tt * vec_dim + dd) * H + y) * W + xx;
            std::size_t cap = (static_cast<std::size_t>(tt) * H + y) * W + xx;
            out[(static_cast<std::size_t>(b) * I + cap) * vec_dim + dd] = X[src];
          }
  bool track = t->node(x.id).track;
  int idx = x.id;
  int out_id = t->push("caps_reshape", std::move(out), track, nullptr);
  if (track) {
    t->node(out_id).backprop = [out_id, idx, B, T, vec_dim, H, W, I, ch](Tape& tp) {
      const Tensor& g = tp.node(out_id).grad;
      Tensor& gx = tp.grad_buf(idx);
      for (int b = 0; b < B; ++b)
        for (int tt = 0; tt < T; ++tt)
          for (int dd = 0; dd < vec_dim; ++dd)
            for (int y = 0; y < H; ++y)
              for (int xx = 0; xx < W; ++xx) {
                std::size_t src =
                    ((static_cast<std::size_t>(b) * ch + tt * vec_dim + dd) * H + y) * W + xx;
                std::size_t cap = (static_cast<std::size_t>(tt) * H + y) * W + xx;
                gx[src] += g[(static_cast<std::size_t>(b) * I + cap) * vec_dim + dd];
              }
    };
  }
  return Var{t, out_id};
}

}  // namespace eegdual
