#include "autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"
#include "rng.hpp"

namespace ssm2mel::ad {

bool Tape::finite_checks = false;
bool Tape::corrupt_gelu_backward = false;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(ErrKind::Shape, std::string(op) + ": incompatible shapes " + shape_str(a.shape) +
                                  " and " + shape_str(b.shape));
}

[[noreturn]] void shape_error1(const char* op, const Tensor& a, const std::string& what) {
  throw Error(ErrKind::Shape, std::string(op) + ": " + what + ", got " + shape_str(a.shape));
}

void check_same_tape(const char* op, Var a, Var b) {
  if (!a.defined() || !b.defined() || a.tape != b.tape)
    throw Error(ErrKind::Shape, std::string(op) + ": operands from different tapes");
}

double sigmoid_val(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus_val(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

const Tensor& Var::val() const { return tape->value(id); }

Var Tape::make(const char* op, Tensor value, bool requires_grad,
               std::function<void(Tape&, int32_t)> back) {
  if (finite_checks && !value.all_finite())
    throw Error(ErrKind::Numeric, std::string(op) + ": non-finite value produced");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return make("leaf", std::move(value), requires_grad, nullptr);
}

Tensor& Tape::grad_buf(int32_t id) {
  Node& n = nodes_[id];
  if (!n.grad_alloc) {
    n.grad = Tensor::zeros(n.value.shape);
    n.grad_alloc = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.grad_alloc) {
    static thread_local Tensor zero;
    zero = Tensor::zeros(n.value.shape);
    return zero;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!loss.defined() || loss.tape != this)
    throw Error(ErrKind::Shape, "backward: loss is not on this tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.numel() != 1)
    throw Error(ErrKind::Shape, "backward: loss must be scalar, got " + shape_str(lv.shape));
  grad_buf(loss.id).data[0] = 1.0;
  for (int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad_alloc && n.back) n.back(*this, id);
  }
}

// ---- elementwise with broadcast ------------------------------------------

namespace {

enum class Bcast { None, RowB, ScalarB, RowA, ScalarA };

Bcast bcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Bcast::None;
  if (b.numel() == 1) return Bcast::ScalarB;
  if (a.numel() == 1) return Bcast::ScalarA;
  if (b.ndim() == 1 && !a.shape.empty() && b.shape[0] == a.shape.back()) return Bcast::RowB;
  if (a.ndim() == 1 && !b.shape.empty() && a.shape[0] == b.shape.back()) return Bcast::RowA;
  shape_error(op, a, b);
}

// f(av, bv) elementwise with one side possibly broadcast.
template <class F>
Tensor bcast_forward(Bcast k, const Tensor& a, const Tensor& b, F f) {
  if (k == Bcast::RowA || k == Bcast::ScalarA) {
    Tensor out = Tensor::zeros(b.shape);
    const int64_t w = b.shape.back();
    for (int64_t i = 0; i < b.numel(); ++i) {
      double av = (k == Bcast::ScalarA) ? a.data[0] : a.data[i % w];
      out.data[i] = f(av, b.data[i]);
    }
    return out;
  }
  Tensor out = Tensor::zeros(a.shape);
  const int64_t w = a.shape.empty() ? 1 : a.shape.back();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double bv = b.data[0];
    if (k == Bcast::None) bv = b.data[i];
    else if (k == Bcast::RowB) bv = b.data[i % w];
    out.data[i] = f(a.data[i], bv);
  }
  return out;
}

// Accumulates g into the gradient of a (possibly broadcast) operand.
void bcast_accumulate(Tensor& dst, const Tensor& g, bool is_row, bool is_scalar, int64_t w) {
  if (is_scalar) {
    double s = 0;
    for (double v : g.data) s += v;
    dst.data[0] += s;
  } else if (is_row) {
    for (int64_t i = 0; i < g.numel(); ++i) dst.data[i % w] += g.data[i];
  } else {
    for (int64_t i = 0; i < g.numel(); ++i) dst.data[i] += g.data[i];
  }
}

Var binary_op(const char* op, Var a, Var b, double (*fwd)(double, double),
              void (*bwd)(Tape&, int32_t, int32_t, int32_t, Bcast)) {
  check_same_tape(op, a, b);
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  Bcast k = bcast_kind(op, av, bv);
  Tensor out = bcast_forward(k, av, bv, fwd);
  bool rg = t.node_requires_grad(a.id) || t.node_requires_grad(b.id);
  int32_t ia = a.id, ib = b.id;
  return t.make(op, std::move(out), rg,
                [ia, ib, k, bwd](Tape& tt, int32_t self) { bwd(tt, self, ia, ib, k); });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](Tape& t, int32_t self, int32_t ia, int32_t ib, Bcast k) {
        const Tensor& g = t.grad_buf(self);
        const int64_t wa = t.value(ia).shape.empty() ? 1 : t.value(ia).shape.back();
        const int64_t wb = t.value(ib).shape.empty() ? 1 : t.value(ib).shape.back();
        if (t.node_requires_grad(ia))
          bcast_accumulate(t.grad_buf(ia), g, k == Bcast::RowA, k == Bcast::ScalarA, wa);
        if (t.node_requires_grad(ib))
          bcast_accumulate(t.grad_buf(ib), g, k == Bcast::RowB, k == Bcast::ScalarB, wb);
      });
}

Var sub(Var a, Var b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](Tape& t, int32_t self, int32_t ia, int32_t ib, Bcast k) {
        const Tensor& g = t.grad_buf(self);
        const int64_t wa = t.value(ia).shape.empty() ? 1 : t.value(ia).shape.back();
        const int64_t wb = t.value(ib).shape.empty() ? 1 : t.value(ib).shape.back();
        if (t.node_requires_grad(ia))
          bcast_accumulate(t.grad_buf(ia), g, k == Bcast::RowA, k == Bcast::ScalarA, wa);
        if (t.node_requires_grad(ib)) {
          Tensor ng = g;
          for (auto& v : ng.data) v = -v;
          bcast_accumulate(t.grad_buf(ib), ng, k == Bcast::RowB, k == Bcast::ScalarB, wb);
        }
      });
}

Var mul(Var a, Var b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](Tape& t, int32_t self, int32_t ia, int32_t ib, Bcast k) {
        // g has the full side's shape; each operand's gradient is g times
        // the other operand, reduced onto its own shape if broadcast.
        const Tensor& g = t.grad_buf(self);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        const bool a_bcast = k == Bcast::RowA || k == Bcast::ScalarA;
        const bool b_bcast = k == Bcast::RowB || k == Bcast::ScalarB;
        const int64_t wa = av.shape.empty() ? 1 : av.shape.back();
        const int64_t wb = bv.shape.empty() ? 1 : bv.shape.back();
        auto pick = [](const Tensor& v, Bcast kk, bool bc, int64_t i, int64_t w) {
          if (!bc) return v.data[i];
          if (kk == Bcast::ScalarA || kk == Bcast::ScalarB) return v.data[0];
          return v.data[i % w];
        };
        if (t.node_requires_grad(ia)) {
          Tensor tmp = Tensor::zeros(g.shape);
          for (int64_t i = 0; i < g.numel(); ++i)
            tmp.data[i] = g.data[i] * pick(bv, k, b_bcast, i, wb);
          bcast_accumulate(t.grad_buf(ia), tmp, k == Bcast::RowA, k == Bcast::ScalarA, wa);
        }
        if (t.node_requires_grad(ib)) {
          Tensor tmp = Tensor::zeros(g.shape);
          for (int64_t i = 0; i < g.numel(); ++i)
            tmp.data[i] = g.data[i] * pick(av, k, a_bcast, i, wa);
          bcast_accumulate(t.grad_buf(ib), tmp, k == Bcast::RowB, k == Bcast::ScalarB, wb);
        }
      });
}

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b) {
  check_same_tape("matmul", a, b);
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0])
    shape_error("matmul", av, bv);
  const int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * n];
      double* orow = &out.data[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  bool rg = t.node_requires_grad(a.id) || t.node_requires_grad(b.id);
  int32_t ia = a.id, ib = b.id;
  return t.make("matmul", std::move(out), rg, [ia, ib, m, k, n](Tape& tt, int32_t self) {
    const Tensor& g = tt.grad_buf(self);
    const Tensor& av2 = tt.value(ia);
    const Tensor& bv2 = tt.value(ib);
    if (tt.node_requires_grad(ia)) {
      Tensor& da = tt.grad_buf(ia);  // g [m,n] @ b^T [n,k]
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double gij = g.data[i * n + j];
          if (gij == 0.0) continue;
          const double* brow = &bv2.data[0] + j;  // column j
          double* darow = &da.data[i * k];
          for (int64_t p = 0; p < k; ++p) darow[p] += gij * brow[p * n];
        }
    }
    if (tt.node_requires_grad(ib)) {
      Tensor& db = tt.grad_buf(ib);  // a^T [k,m] @ g [m,n]
      for (int64_t i = 0; i < m; ++i) {
        const double* grow = &g.data[i * n];
        for (int64_t p = 0; p < k; ++p) {
          const double aip = av2.data[i * k + p];
          if (aip == 0.0) continue;
          double* dbrow = &db.data[p * n];
          for (int64_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  if (av.ndim() != 2) shape_error1("transpose", av, "expected matrix");
  const int64_t r = av.shape[0], c = av.shape[1];
  Tensor out = Tensor::zeros({c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.data[j * r + i] = av.data[i * c + j];
  int32_t ia = a.id;
  return t.make("transpose", std::move(out), t.node_requires_grad(a.id),
                [ia, r, c](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[j * r + i];
                });
}

Var reshape(Var a, std::vector<int64_t> shape) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  if (shape_numel(shape) != av.numel())
    shape_error1("reshape", av, "element count mismatch with " + shape_str(shape));
  Tensor out(shape, av.data);
  int32_t ia = a.id;
  return t.make("reshape", std::move(out), t.node_requires_grad(a.id),
                [ia](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
                });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw Error(ErrKind::Shape, "concat: no inputs");
  Tape& t = *xs[0].tape;
  const int nd = xs[0].val().ndim();
  if (nd == 1 && axis != 0) shape_error1("concat", xs[0].val(), "axis out of range");
  if (nd == 2 && axis != 0 && axis != 1) shape_error1("concat", xs[0].val(), "axis out of range");

  bool rg = false;
  int64_t total = 0;
  for (const Var& x : xs) {
    check_same_tape("concat", xs[0], x);
    const Tensor& v = x.val();
    if (v.ndim() != nd) shape_error("concat", xs[0].val(), v);
    if (nd == 2 && v.shape[1 - axis] != xs[0].val().shape[1 - axis])
      shape_error("concat", xs[0].val(), v);
    total += v.shape[axis];
    rg = rg || t.node_requires_grad(x.id);
  }

  std::vector<int64_t> oshape = xs[0].val().shape;
  oshape[axis] = total;
  Tensor out = Tensor::zeros(oshape);
  std::vector<int32_t> ids;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  const int64_t ocols = nd == 2 ? oshape[1] : 1;
  for (const Var& x : xs) {
    const Tensor& v = x.val();
    ids.push_back(x.id);
    offsets.push_back(off);
    if (nd == 1 || axis == 0) {
      std::copy(v.data.begin(), v.data.end(),
                out.data.begin() + off * (nd == 2 ? ocols : 1));
    } else {
      for (int64_t i = 0; i < v.shape[0]; ++i)
        for (int64_t j = 0; j < v.shape[1]; ++j)
          out.data[i * ocols + off + j] = v.data[i * v.shape[1] + j];
    }
    off += v.shape[axis];
  }

  return t.make("concat", std::move(out), rg,
                [ids, offsets, axis, nd, ocols](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  for (size_t s = 0; s < ids.size(); ++s) {
                    if (!tt.node_requires_grad(ids[s])) continue;
                    Tensor& dx = tt.grad_buf(ids[s]);
                    const auto& xs2 = tt.value(ids[s]);
                    const int64_t o = offsets[s];
                    if (nd == 1 || axis == 0) {
                      const int64_t base = o * (nd == 2 ? ocols : 1);
                      for (int64_t i = 0; i < xs2.numel(); ++i) dx.data[i] += g.data[base + i];
                    } else {
                      for (int64_t i = 0; i < xs2.shape[0]; ++i)
                        for (int64_t j = 0; j < xs2.shape[1]; ++j)
                          dx.data[i * xs2.shape[1] + j] += g.data[i * ocols + o + j];
                    }
                  }
                });
}

Var slice(Var a, int axis, int64_t start, int64_t len) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  const int nd = av.ndim();
  if (nd != 1 && nd != 2) shape_error1("slice", av, "expected 1-D or 2-D");
  if (axis < 0 || axis >= nd) shape_error1("slice", av, "axis out of range");
  if (start < 0 || len < 1 || start + len > av.shape[axis])
    shape_error1("slice", av,
                 "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds on axis " + std::to_string(axis));

  Tensor out;
  if (nd == 1) {
    out = Tensor::zeros({len});
    for (int64_t i = 0; i < len; ++i) out.data[i] = av.data[start + i];
  } else if (axis == 0) {
    out = Tensor::zeros({len, av.shape[1]});
    std::copy(av.data.begin() + start * av.shape[1],
              av.data.begin() + (start + len) * av.shape[1], out.data.begin());
  } else {
    out = Tensor::zeros({av.shape[0], len});
    for (int64_t i = 0; i < av.shape[0]; ++i)
      for (int64_t j = 0; j < len; ++j) out.data[i * len + j] = av.data[i * av.shape[1] + start + j];
  }
  int32_t ia = a.id;
  return t.make("slice", std::move(out), t.node_requires_grad(a.id),
                [ia, axis, start, len, nd](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  const auto& ash = tt.value(ia).shape;
                  if (nd == 1) {
                    for (int64_t i = 0; i < len; ++i) da.data[start + i] += g.data[i];
                  } else if (axis == 0) {
                    for (int64_t i = 0; i < g.numel(); ++i) da.data[start * ash[1] + i] += g.data[i];
                  } else {
                    for (int64_t i = 0; i < ash[0]; ++i)
                      for (int64_t j = 0; j < len; ++j)
                        da.data[i * ash[1] + start + j] += g.data[i * len + j];
                  }
                });
}

Var pad2d(Var a, int64_t top, int64_t bottom, int64_t left, int64_t right) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  if (av.ndim() != 2) shape_error1("pad", av, "expected matrix");
  if (top < 0 || bottom < 0 || left < 0 || right < 0)
    shape_error1("pad", av, "negative padding");
  if (top + bottom + left + right == 0) return a;
  const int64_t r = av.shape[0], c = av.shape[1];
  Tensor out = Tensor::zeros({r + top + bottom, c + left + right});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out.data[(i + top) * (c + left + right) + left + j] = av.data[i * c + j];
  int32_t ia = a.id;
  return t.make("pad", std::move(out), t.node_requires_grad(a.id),
                [ia, top, left, r, c](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  const int64_t oc = g.shape[1];
                  for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j)
                      da.data[i * c + j] += g.data[(i + top) * oc + left + j];
                });
}

// ---- convolutions --------------------------------------------------------

Var conv1d(Var x, Var w, Var b, int64_t stride, int64_t groups) {
  check_same_tape("conv1d", x, w);
  Tape& t = *x.tape;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.ndim() != 2 || wv.ndim() != 3) shape_error("conv1d", xv, wv);
  const int64_t T = xv.shape[0], cin = xv.shape[1];
  const int64_t cout = wv.shape[0], cing = wv.shape[1], K = wv.shape[2];
  if (stride < 1 || groups < 1 || cin % groups != 0 || cout % groups != 0 ||
      cing != cin / groups)
    shape_error("conv1d", xv, wv);
  if (T < K) shape_error1("conv1d", xv, "input shorter than kernel " + std::to_string(K));
  const int64_t To = (T - K) / stride + 1;
  const bool has_b = b.defined();
  if (has_b) {
    check_same_tape("conv1d", x, b);
    if (b.val().ndim() != 1 || b.val().shape[0] != cout) shape_error("conv1d", wv, b.val());
  }

  Tensor out = Tensor::zeros({To, cout});
  const int64_t gout = cout / groups;
  for (int64_t to = 0; to < To; ++to) {
    for (int64_t co = 0; co < cout; ++co) {
      const int64_t gidx = co / gout;
      double acc = has_b ? b.val().data[co] : 0.0;
      for (int64_t k = 0; k < K; ++k) {
        const double* xr = &xv.data[(to * stride + k) * cin + gidx * cing];
        const double* wr = &wv.data[(co * cing + 0) * K + k];
        for (int64_t ci = 0; ci < cing; ++ci) acc += wr[ci * K] * xr[ci];
      }
      out.data[to * cout + co] = acc;
    }
  }

  bool rg = t.node_requires_grad(x.id) || t.node_requires_grad(w.id) ||
            (has_b && t.node_requires_grad(b.id));
  int32_t ix = x.id, iw = w.id, ib = has_b ? b.id : -1;
  return t.make("conv1d", std::move(out), rg,
                [ix, iw, ib, stride, groups, T, cin, cout, cing, K, To, gout](Tape& tt,
                                                                              int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& xv2 = tt.value(ix);
                  const Tensor& wv2 = tt.value(iw);
                  const bool need_dx = tt.node_requires_grad(ix);
                  const bool need_dw = tt.node_requires_grad(iw);
                  const bool need_db = ib >= 0 && tt.node_requires_grad(ib);
                  Tensor* dx = need_dx ? &tt.grad_buf(ix) : nullptr;
                  Tensor* dw = need_dw ? &tt.grad_buf(iw) : nullptr;
                  Tensor* db = need_db ? &tt.grad_buf(ib) : nullptr;
                  for (int64_t to = 0; to < To; ++to) {
                    for (int64_t co = 0; co < cout; ++co) {
                      const double gv = g.data[to * cout + co];
                      if (gv == 0.0) continue;
                      const int64_t gidx = co / gout;
                      if (db) db->data[co] += gv;
                      for (int64_t k = 0; k < K; ++k) {
                        const int64_t ti = to * stride + k;
                        for (int64_t ci = 0; ci < cing; ++ci) {
                          const int64_t xi = ti * cin + gidx * cing + ci;
                          const int64_t wi = (co * cing + ci) * K + k;
                          if (dx) dx->data[xi] += gv * wv2.data[wi];
                          if (dw) dw->data[wi] += gv * xv2.data[xi];
                        }
                      }
                    }
                  }
                  (void)T;
                });
}

Var conv1d_transpose(Var x, Var w, Var b, int64_t stride) {
  check_same_tape("conv1d_transpose", x, w);
  Tape& t = *x.tape;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.ndim() != 2 || wv.ndim() != 3) shape_error("conv1d_transpose", xv, wv);
  const int64_t T = xv.shape[0], cin = xv.shape[1];
  if (wv.shape[0] != cin || stride < 1) shape_error("conv1d_transpose", xv, wv);
  const int64_t cout = wv.shape[1], K = wv.shape[2];
  const int64_t To = (T - 1) * stride + K;
  const bool has_b = b.defined();
  if (has_b && (b.val().ndim() != 1 || b.val().shape[0] != cout))
    shape_error("conv1d_transpose", wv, b.val());

  Tensor out = Tensor::zeros({To, cout});
  if (has_b) {
    for (int64_t to = 0; to < To; ++to)
      for (int64_t co = 0; co < cout; ++co) out.data[to * cout + co] = b.val().data[co];
  }
  for (int64_t ti = 0; ti < T; ++ti) {
    for (int64_t ci = 0; ci < cin; ++ci) {
      const double xval = xv.data[ti * cin + ci];
      if (xval == 0.0) continue;
      for (int64_t k = 0; k < K; ++k) {
        const int64_t to = ti * stride + k;
        const double* wr = &wv.data[(ci * cout) * K + k];
        double* orow = &out.data[to * cout];
        for (int64_t co = 0; co < cout; ++co) orow[co] += xval * wr[co * K];
      }
    }
  }

  bool rg = t.node_requires_grad(x.id) || t.node_requires_grad(w.id) ||
            (has_b && t.node_requires_grad(b.id));
  int32_t ix = x.id, iw = w.id, ib = has_b ? b.id : -1;
  return t.make("conv1d_transpose", std::move(out), rg,
                [ix, iw, ib, stride, T, cin, cout, K, To](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& xv2 = tt.value(ix);
                  const Tensor& wv2 = tt.value(iw);
                  const bool need_dx = tt.node_requires_grad(ix);
                  const bool need_dw = tt.node_requires_grad(iw);
                  const bool need_db = ib >= 0 && tt.node_requires_grad(ib);
                  if (need_db) {
                    Tensor& db = tt.grad_buf(ib);
                    for (int64_t to = 0; to < To; ++to)
                      for (int64_t co = 0; co < cout; ++co) db.data[co] += g.data[to * cout + co];
                  }
                  if (!need_dx && !need_dw) return;
                  Tensor* dx = need_dx ? &tt.grad_buf(ix) : nullptr;
                  Tensor* dw = need_dw ? &tt.grad_buf(iw) : nullptr;
                  for (int64_t ti = 0; ti < T; ++ti) {
                    for (int64_t ci = 0; ci < cin; ++ci) {
                      const int64_t xi = ti * cin + ci;
                      for (int64_t k = 0; k < K; ++k) {
                        const int64_t to = ti * stride + k;
                        const double* grow = &g.data[to * cout];
                        for (int64_t co = 0; co < cout; ++co) {
                          const int64_t wi = (ci * cout + co) * K + k;
                          if (dx) dx->data[xi] += grow[co] * wv2.data[wi];
                          if (dw) dw->data[wi] += grow[co] * xv2.data[xi];
                        }
                      }
                    }
                  }
                });
}

// ---- row-wise normalizations ---------------------------------------------

namespace {

void rows_cols(const Tensor& v, int64_t& rows, int64_t& cols) {
  if (v.ndim() == 1) {
    rows = 1;
    cols = v.shape[0];
  } else {
    cols = v.shape.back();
    rows = v.numel() / cols;
  }
}

}  // namespace

Var softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  int64_t rows, cols;
  rows_cols(av, rows, cols);
  Tensor out = Tensor::zeros(av.shape);
  for (int64_t i = 0; i < rows; ++i) {
    const double* xr = &av.data[i * cols];
    double* yr = &out.data[i * cols];
    double mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int64_t j = 0; j < cols; ++j) yr[j] /= s;
  }
  int32_t ia = a.id;
  return t.make("softmax", std::move(out), t.node_requires_grad(a.id),
                [ia, rows, cols](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& y = tt.value(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < rows; ++i) {
                    const double* yr = &y.data[i * cols];
                    const double* gr = &g.data[i * cols];
                    double dot = 0;
                    for (int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
                    double* dr = &da.data[i * cols];
                    for (int64_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
                  }
                });
}

Var layer_norm(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  int64_t rows, cols;
  rows_cols(av, rows, cols);
  Tensor out = Tensor::zeros(av.shape);
  Tensor invstd = Tensor::zeros({rows});
  for (int64_t i = 0; i < rows; ++i) {
    const double* xr = &av.data[i * cols];
    double* yr = &out.data[i * cols];
    double mu = 0;
    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0;
    for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    invstd.data[i] = inv;
    for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * inv;
  }
  int32_t ia = a.id;
  return t.make("layer_norm", std::move(out), t.node_requires_grad(a.id),
                [ia, rows, cols, invstd](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& y = tt.value(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < rows; ++i) {
                    const double* yr = &y.data[i * cols];
                    const double* gr = &g.data[i * cols];
                    double gmean = 0, gymean = 0;
                    for (int64_t j = 0; j < cols; ++j) {
                      gmean += gr[j];
                      gymean += gr[j] * yr[j];
                    }
                    gmean /= static_cast<double>(cols);
                    gymean /= static_cast<double>(cols);
                    const double inv = invstd.data[i];
                    double* dr = &da.data[i * cols];
                    for (int64_t j = 0; j < cols; ++j)
                      dr[j] += inv * (gr[j] - gmean - yr[j] * gymean);
                  }
                });
}

// ---- elementwise unary ----------------------------------------------------

namespace {

Var unary_op(const char* op, Var a, double (*fwd)(double), double (*dfdx)(double, double)) {
  // dfdx receives (x, y) so rules can reuse the forward value.
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  Tensor out = Tensor::zeros(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = fwd(av.data[i]);
  int32_t ia = a.id;
  return t.make(op, std::move(out), t.node_requires_grad(a.id),
                [ia, dfdx](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& xv = tt.value(ia);
                  const Tensor& yv = tt.value(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < g.numel(); ++i)
                    da.data[i] += g.data[i] * dfdx(xv.data[i], yv.data[i]);
                });
}

}  // namespace

Var gelu(Var a) {
  return unary_op(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                   x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        if (Tape::corrupt_gelu_backward) d *= 1.01;
        return d;
      });
}

Var silu(Var a) {
  return unary_op(
      "silu", a, [](double x) { return x * sigmoid_val(x); },
      [](double x, double) {
        const double s = sigmoid_val(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var softplus(Var a) {
  return unary_op(
      "softplus", a, [](double x) { return softplus_val(x); },
      [](double x, double) { return sigmoid_val(x); });
}

Var sigmoid(Var a) {
  return unary_op(
      "sigmoid", a, [](double x) { return sigmoid_val(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

Var abs(Var a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var power(Var a, double p) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  Tensor out = Tensor::zeros(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = std::pow(av.data[i], p);
  int32_t ia = a.id;
  return t.make("power", std::move(out), t.node_requires_grad(a.id),
                [ia, p](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  const Tensor& xv = tt.value(ia);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < g.numel(); ++i)
                    da.data[i] += g.data[i] * p * std::pow(xv.data[i], p - 1.0);
                });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  Tensor out = Tensor::zeros(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * c;
  int32_t ia = a.id;
  return t.make("scale", std::move(out), t.node_requires_grad(a.id),
                [ia, c](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i] * c;
                });
}

Var add_const(Var a, double c) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  Tensor out = Tensor::zeros(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + c;
  int32_t ia = a.id;
  return t.make("add_const", std::move(out), t.node_requires_grad(a.id),
                [ia](Tape& tt, int32_t self) {
                  const Tensor& g = tt.grad_buf(self);
                  Tensor& da = tt.grad_buf(ia);
                  for (int64_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
                });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  double s = 0;
  for (double v : av.data) s += v;
  int32_t ia = a.id;
  return t.make("sum", Tensor::scalar(s), t.node_requires_grad(a.id),
                [ia](Tape& tt, int32_t self) {
                  const double g = tt.grad_buf(self).data[0];
                  Tensor& da = tt.grad_buf(ia);
                  for (auto& v : da.data) v += g;
                });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = a.val();
  double s = 0;
  for (double v : av.data) s += v;
  const double n = static_cast<double>(av.numel());
  int32_t ia = a.id;
  return t.make("mean", Tensor::scalar(s / n), t.node_requires_grad(a.id),
                [ia, n](Tape& tt, int32_t self) {
                  const double g = tt.grad_buf(self).data[0] / n;
                  Tensor& da = tt.grad_buf(ia);
                  for (auto& v : da.data) v += g;
                });
}

// ---- gradient checker ------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                           double step, double tol, int64_t max_coords, uint64_t sample_seed) {
  GradCheckReport rep;
  rep.step = step;
  rep.tol = tol;

  Tensor analytic;
  {
    Tape tape;
    Var vx = tape.leaf(x, true);
    Var y = f(tape, vx);
    if (y.val().numel() != 1)
      throw Error(ErrKind::Shape, "grad_check: f must be scalar-valued");
    tape.backward(y);
    analytic = tape.grad(vx);
  }

  auto eval = [&](const Tensor& xp) {
    Tape tape;
    Var vx = tape.leaf(xp, false);
    return f(tape, vx).val().scalar_value();
  };

  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < x.numel()) {
    Xoshiro256pp rng(sample_seed);
    for (int64_t i = 0; i < max_coords; ++i) {
      int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(coords.size() - i)));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(static_cast<size_t>(max_coords));
  }

  Tensor xp = x;
  for (int64_t idx : coords) {
    const double orig = xp.data[idx];
    xp.data[idx] = orig + step;
    const double fp = eval(xp);
    xp.data[idx] = orig - step;
    const double fm = eval(xp);
    xp.data[idx] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic.data[idx];
    const double rel = std::fabs(a - numeric) /
                       std::max({std::fabs(a), std::fabs(numeric), 1e-3});
    ++rep.checked;
    if (rel > rep.max_rel_err) rep.max_rel_err = rel;
    if (rel >= tol || rep.worst.size() < 4) {
      rep.worst.push_back({idx, a, numeric, rel});
      std::sort(rep.worst.begin(), rep.worst.end(),
                [](const GradCheckEntry& p, const GradCheckEntry& q) { return p.rel_err > q.rel_err; });
      if (rep.worst.size() > 8) rep.worst.resize(8);
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace ssm2mel::ad
