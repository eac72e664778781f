#include "carnet/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace carnet::ag {

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw DimensionError("vars belong to different tapes");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
  return make(std::move(value), requires_grad, nullptr);
}

Var Tape::make(Tensor value, bool rg, std::function<void(Tape&, int)> back) {
  Node n;
  n.grad = Tensor::zeros(value.shape);
  n.val = std::move(value);
  n.rg = rg;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw DimensionError("backward: var not on this tape");
  if (nodes_[root.id].val.numel() != 1)
    throw DimensionError("backward: root must be scalar");
  nodes_[root.id].grad.data[0] = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.back && n.rg) n.back(*this, i);
  }
}

Var constant(Tape& t, Tensor v) { return t.leaf(std::move(v), false); }

// ---------------------------------------------------------------- elementwise

static Var binary_ew(Var a, Var b, const char* name,
                     double (*fwd)(double, double),
                     void (*bwd)(double, double, double, double&, double&)) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  check_same_shape(av, bv, name);
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = fwd(av.data[i], bv.data[i]);
  int ai = a.id, bi = b.id;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.make(std::move(out), rg, [ai, bi, bwd](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& av2 = tp.val_at(ai);
    const Tensor& bv2 = tp.val_at(bi);
    Tensor& ga = tp.grad_at(ai);
    Tensor& gb = tp.grad_at(bi);
    bool na = tp.rg_at(ai), nb = tp.rg_at(bi);
    for (int64_t i = 0; i < g.numel(); ++i) {
      double da = 0, db = 0;
      bwd(av2.data[i], bv2.data[i], g.data[i], da, db);
      if (na) ga.data[i] += da;
      if (nb) gb.data[i] += db;
    }
  });
}

Var add(Var a, Var b) {
  return binary_ew(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Var sub(Var a, Var b) {
  return binary_ew(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Var mul(Var a, Var b) {
  return binary_ew(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

static Var unary_ew(Var a, double (*fwd)(double), double (*dfn)(double, double)) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = fwd(av.data[i]);
  int ai = a.id;
  return t.make(std::move(out), t.requires_grad(a), [ai, dfn](Tape& tp, int self) {
    if (!tp.rg_at(ai)) return;
    const Tensor& g = tp.grad_at(self);
    const Tensor& y = tp.val_at(self);
    const Tensor& x = tp.val_at(ai);
    Tensor& ga = tp.grad_at(ai);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[i] += g.data[i] * dfn(x.data[i], y.data[i]);
  });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * c;
  int ai = a.id;
  return t.make(std::move(out), t.requires_grad(a), [ai, c](Tape& tp, int self) {
    if (!tp.rg_at(ai)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& ga = tp.grad_at(ai);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * c;
  });
}

Var vexp(Var a) {
  return unary_ew(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Var vtanh(Var a) {
  return unary_ew(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Var leaky_relu(Var a, double slope) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) {
    double x = av.data[i];
    out.data[i] = x > 0 ? x : slope * x;
  }
  int ai = a.id;
  return t.make(std::move(out), t.requires_grad(a), [ai, slope](Tape& tp, int self) {
    if (!tp.rg_at(ai)) return;
    const Tensor& g = tp.grad_at(self);
    const Tensor& x = tp.val_at(ai);
    Tensor& ga = tp.grad_at(ai);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[i] += g.data[i] * (x.data[i] > 0 ? 1.0 : slope);
  });
}

Var vlog_shift(Var a, double eta) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  Tensor out(av.shape);
  for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = std::log(av.data[i] + eta);
  int ai = a.id;
  return t.make(std::move(out), t.requires_grad(a), [ai, eta](Tape& tp, int self) {
    if (!tp.rg_at(ai)) return;
    const Tensor& g = tp.grad_at(self);
    const Tensor& x = tp.val_at(ai);
    Tensor& ga = tp.grad_at(ai);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[i] += g.data[i] / (x.data[i] + eta);
  });
}

// ------------------------------------------------------------------ structure

Var slice_ch(Var x, int64_t c0, int64_t c1) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.ndim() != 4) throw DimensionError("slice_ch expects 4-D input");
  int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  if (c0 < 0 || c1 > C || c0 >= c1) throw DimensionError("slice_ch: bad channel range");
  Tensor out({N, c1 - c0, H, W});
  int64_t hw = H * W;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = c0; c < c1; ++c)
      std::copy_n(&xv.data[(n * C + c) * hw], hw, &out.data[(n * (c1 - c0) + (c - c0)) * hw]);
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, c0, c1](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    int64_t N = gx.shape[0], C = gx.shape[1], hw = gx.shape[2] * gx.shape[3];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = c0; c < c1; ++c) {
        const double* src = &g.data[(n * (c1 - c0) + (c - c0)) * hw];
        double* dst = &gx.data[(n * C + c) * hw];
        for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
}

Var concat_ch(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.ndim() != 4 || bv.ndim() != 4) throw DimensionError("concat_ch expects 4-D");
  if (av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[2] ||
      av.shape[3] != bv.shape[3])
    throw DimensionError("concat_ch: incompatible shapes");
  int64_t N = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1];
  int64_t hw = av.shape[2] * av.shape[3];
  Tensor out({N, Ca + Cb, av.shape[2], av.shape[3]});
  for (int64_t n = 0; n < N; ++n) {
    std::copy_n(&av.data[n * Ca * hw], Ca * hw, &out.data[n * (Ca + Cb) * hw]);
    std::copy_n(&bv.data[n * Cb * hw], Cb * hw, &out.data[(n * (Ca + Cb) + Ca) * hw]);
  }
  int ai = a.id, bi = b.id;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.make(std::move(out), rg, [ai, bi, Ca, Cb, hw](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    int64_t N = g.shape[0];
    if (tp.rg_at(ai)) {
      Tensor& ga = tp.grad_at(ai);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < Ca * hw; ++i)
          ga.data[n * Ca * hw + i] += g.data[n * (Ca + Cb) * hw + i];
    }
    if (tp.rg_at(bi)) {
      Tensor& gb = tp.grad_at(bi);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < Cb * hw; ++i)
          gb.data[n * Cb * hw + i] += g.data[(n * (Ca + Cb) + Ca) * hw + i];
    }
  });
}

Var select_sample(Var x, int64_t i) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.ndim() < 1 || i < 0 || i >= xv.shape[0])
    throw DimensionError("select_sample: index out of range");
  int64_t stride = xv.numel() / xv.shape[0];
  std::vector<int64_t> oshape = xv.shape;
  oshape[0] = 1;
  Tensor out(oshape);
  std::copy_n(&xv.data[i * stride], stride, out.data.begin());
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, i, stride](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    for (int64_t k = 0; k < stride; ++k) gx.data[i * stride + k] += g.data[k];
  });
}

Var concat_samples(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_samples: empty list");
  Tape& t = *xs[0].tape;
  std::vector<int64_t> oshape = t.val(xs[0]).shape;
  int64_t per = t.val(xs[0]).numel() / oshape[0];
  int64_t total = 0;
  bool rg = false;
  for (Var v : xs) {
    check_same_tape(xs[0], v);
    const Tensor& tv = t.val(v);
    if (tv.numel() / tv.shape[0] != per) throw DimensionError("concat_samples: shape mismatch");
    total += tv.shape[0];
    rg = rg || t.requires_grad(v);
  }
  oshape[0] = total;
  Tensor out(oshape);
  int64_t off = 0;
  std::vector<int> ids;
  std::vector<int64_t> counts;
  for (Var v : xs) {
    const Tensor& tv = t.val(v);
    std::copy_n(tv.data.begin(), tv.numel(), out.data.begin() + off);
    off += tv.numel();
    ids.push_back(v.id);
    counts.push_back(tv.numel());
  }
  return t.make(std::move(out), rg, [ids, counts](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    int64_t off2 = 0;
    for (size_t j = 0; j < ids.size(); ++j) {
      if (tp.rg_at(ids[j])) {
        Tensor& gx = tp.grad_at(ids[j]);
        for (int64_t k = 0; k < counts[j]; ++k) gx.data[k] += g.data[off2 + k];
      }
      off2 += counts[j];
    }
  });
}

Var select_row(Var x, int64_t i) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.ndim() != 2 || i < 0 || i >= xv.shape[0])
    throw DimensionError("select_row: bad index");
  int64_t K = xv.shape[1];
  Tensor out({K});
  std::copy_n(&xv.data[i * K], K, out.data.begin());
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, i, K](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    for (int64_t k = 0; k < K; ++k) gx.data[i * K + k] += g.data[k];
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty list");
  Tape& t = *rows[0].tape;
  int64_t K = t.val(rows[0]).numel();
  Tensor out({static_cast<int64_t>(rows.size()), K});
  bool rg = false;
  std::vector<int> ids;
  for (size_t r = 0; r < rows.size(); ++r) {
    const Tensor& rv = t.val(rows[r]);
    if (rv.numel() != K) throw DimensionError("stack_rows: length mismatch");
    std::copy_n(rv.data.begin(), K, out.data.begin() + r * K);
    rg = rg || t.requires_grad(rows[r]);
    ids.push_back(rows[r].id);
  }
  return t.make(std::move(out), rg, [ids, K](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    for (size_t r = 0; r < ids.size(); ++r) {
      if (!tp.rg_at(ids[r])) continue;
      Tensor& gx = tp.grad_at(ids[r]);
      for (int64_t k = 0; k < K; ++k) gx.data[k] += g.data[r * K + k];
    }
  });
}

// ----------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  double s = 0;
  for (double v : av.data) s += v;
  int ai = a.id;
  return t.make(Tensor({1}, {s}), t.requires_grad(a), [ai](Tape& tp, int self) {
    if (!tp.rg_at(ai)) return;
    double g = tp.grad_at(self).data[0];
    Tensor& ga = tp.grad_at(ai);
    for (double& v : ga.data) v += g;
  });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  return scale(sum(a), 1.0 / static_cast<double>(t.val(a).numel()));
}

Var l1_mean(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  check_same_shape(av, bv, "l1_mean");
  double s = 0;
  int64_t n = av.numel();
  for (int64_t i = 0; i < n; ++i) s += std::abs(av.data[i] - bv.data[i]);
  s /= static_cast<double>(n);
  int ai = a.id, bi = b.id;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.make(Tensor({1}, {s}), rg, [ai, bi, n](Tape& tp, int self) {
    double g = tp.grad_at(self).data[0] / static_cast<double>(n);
    const Tensor& av2 = tp.val_at(ai);
    const Tensor& bv2 = tp.val_at(bi);
    bool na = tp.rg_at(ai), nb = tp.rg_at(bi);
    for (int64_t i = 0; i < n; ++i) {
      double d = av2.data[i] - bv2.data[i];
      double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (na) tp.grad_at(ai).data[i] += g * sg;
      if (nb) tp.grad_at(bi).data[i] -= g * sg;
    }
  });
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var wsum(const std::vector<std::pair<double, Var>>& terms) {
  if (terms.empty()) throw DimensionError("wsum: empty");
  Var acc = scale(terms[0].second, terms[0].first);
  for (size_t i = 1; i < terms.size(); ++i)
    acc = add(acc, scale(terms[i].second, terms[i].first));
  return acc;
}

// ------------------------------------------------------------------------- nn

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(b);
  if (xv.ndim() != 4 || wv.ndim() != 4) throw DimensionError("conv2d expects 4-D x and w");
  if (wv.shape[2] != 3 || wv.shape[3] != 3) throw DimensionError("conv2d: only 3x3 kernels");
  if (wv.shape[1] != xv.shape[1])
    throw DimensionError("conv2d: in-channel mismatch " + shape_str(xv.shape) + " vs " +
                         shape_str(wv.shape));
  if (bv.numel() != wv.shape[0]) throw DimensionError("conv2d: bias size mismatch");
  int64_t N = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int64_t Cout = wv.shape[0];
  int64_t Ho = (H + 2 * pad - 3) / stride + 1;
  int64_t Wo = (W + 2 * pad - 3) / stride + 1;
  if (Ho < 1 || Wo < 1) throw DimensionError("conv2d: output would be empty");
  Tensor out({N, Cout, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < Cout; ++oc) {
      double bias = bv.data[oc];
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = bias;
          int64_t iy0 = oy * stride - pad;
          int64_t ix0 = ox * stride - pad;
          for (int64_t ic = 0; ic < Cin; ++ic) {
            const double* xp = &xv.data[((n * Cin + ic) * H) * W];
            const double* wp = &wv.data[((oc * Cin + ic) * 3) * 3];
            for (int64_t ky = 0; ky < 3; ++ky) {
              int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= H) continue;
              const double* xrow = xp + iy * W;
              const double* wrow = wp + ky * 3;
              for (int64_t kx = 0; kx < 3; ++kx) {
                int64_t ix = ix0 + kx;
                if (ix < 0 || ix >= W) continue;
                acc += xrow[ix] * wrow[kx];
              }
            }
          }
          out.data[((n * Cout + oc) * Ho + oy) * Wo + ox] = acc;
        }
    }
  int xi = x.id, wi = w.id, bi = b.id;
  bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
  return t.make(std::move(out), rg,
                [xi, wi, bi, stride, pad, N, Cin, H, W, Cout, Ho, Wo](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& xv2 = tp.val_at(xi);
    const Tensor& wv2 = tp.val_at(wi);
    bool nx = tp.rg_at(xi), nw = tp.rg_at(wi), nb = tp.rg_at(bi);
    Tensor& gx = tp.grad_at(xi);
    Tensor& gw = tp.grad_at(wi);
    Tensor& gb = tp.grad_at(bi);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t oc = 0; oc < Cout; ++oc)
        for (int64_t oy = 0; oy < Ho; ++oy)
          for (int64_t ox = 0; ox < Wo; ++ox) {
            double go = g.data[((n * Cout + oc) * Ho + oy) * Wo + ox];
            if (go == 0.0) continue;
            if (nb) gb.data[oc] += go;
            int64_t iy0 = oy * stride - pad;
            int64_t ix0 = ox * stride - pad;
            for (int64_t ic = 0; ic < Cin; ++ic) {
              const double* xp = &xv2.data[((n * Cin + ic) * H) * W];
              const double* wp = &wv2.data[((oc * Cin + ic) * 3) * 3];
              double* gxp = nx ? &gx.data[((n * Cin + ic) * H) * W] : nullptr;
              double* gwp = nw ? &gw.data[((oc * Cin + ic) * 3) * 3] : nullptr;
              for (int64_t ky = 0; ky < 3; ++ky) {
                int64_t iy = iy0 + ky;
                if (iy < 0 || iy >= H) continue;
                for (int64_t kx = 0; kx < 3; ++kx) {
                  int64_t ix = ix0 + kx;
                  if (ix < 0 || ix >= W) continue;
                  if (nx) gxp[iy * W + ix] += go * wp[ky * 3 + kx];
                  if (nw) gwp[ky * 3 + kx] += go * xp[iy * W + ix];
                }
              }
            }
          }
  });
}

Var linear(Var x, Var w, Var b) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(b);
  if (xv.ndim() != 2 || wv.ndim() != 2) throw DimensionError("linear expects 2-D x and w");
  if (xv.shape[1] != wv.shape[1]) throw DimensionError("linear: in-feature mismatch");
  if (bv.numel() != wv.shape[0]) throw DimensionError("linear: bias size mismatch");
  int64_t N = xv.shape[0], Cin = xv.shape[1], Cout = wv.shape[0];
  Tensor out({N, Cout});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < Cout; ++o) {
      double acc = bv.data[o];
      for (int64_t i = 0; i < Cin; ++i) acc += xv.data[n * Cin + i] * wv.data[o * Cin + i];
      out.data[n * Cout + o] = acc;
    }
  int xi = x.id, wi = w.id, bi = b.id;
  bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
  return t.make(std::move(out), rg, [xi, wi, bi, N, Cin, Cout](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& xv2 = tp.val_at(xi);
    const Tensor& wv2 = tp.val_at(wi);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t o = 0; o < Cout; ++o) {
        double go = g.data[n * Cout + o];
        if (tp.rg_at(bi)) tp.grad_at(bi).data[o] += go;
        for (int64_t i = 0; i < Cin; ++i) {
          if (tp.rg_at(xi)) tp.grad_at(xi).data[n * Cin + i] += go * wv2.data[o * Cin + i];
          if (tp.rg_at(wi)) tp.grad_at(wi).data[o * Cin + i] += go * xv2.data[n * Cin + i];
        }
      }
  });
}

Var global_avg_pool(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.ndim() != 4) throw DimensionError("global_avg_pool expects 4-D");
  int64_t N = xv.shape[0], C = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      const double* p = &xv.data[(n * C + c) * hw];
      for (int64_t i = 0; i < hw; ++i) s += p[i];
      out.data[n * C + c] = s / static_cast<double>(hw);
    }
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, C, hw](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    int64_t N = g.shape[0];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double gv = g.data[n * C + c] / static_cast<double>(hw);
        double* p = &gx.data[(n * C + c) * hw];
        for (int64_t i = 0; i < hw; ++i) p[i] += gv;
      }
  });
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.ndim() != 2) throw DimensionError("softmax_rows expects 2-D");
  int64_t N = xv.shape[0], K = xv.shape[1];
  Tensor out({N, K});
  for (int64_t n = 0; n < N; ++n) {
    double mx = xv.data[n * K];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, xv.data[n * K + k]);
    double z = 0;
    for (int64_t k = 0; k < K; ++k) {
      double e = std::exp(xv.data[n * K + k] - mx);
      out.data[n * K + k] = e;
      z += e;
    }
    for (int64_t k = 0; k < K; ++k) out.data[n * K + k] /= z;
  }
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi, N, K](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    const Tensor& s = tp.val_at(self);
    Tensor& gx = tp.grad_at(xi);
    for (int64_t n = 0; n < N; ++n) {
      double gdot = 0;
      for (int64_t k = 0; k < K; ++k) gdot += g.data[n * K + k] * s.data[n * K + k];
      for (int64_t k = 0; k < K; ++k)
        gx.data[n * K + k] += s.data[n * K + k] * (g.data[n * K + k] - gdot);
    }
  });
}

Var kernel_mix(Var bank, Var pi) {
  check_same_tape(bank, pi);
  Tape& t = *bank.tape;
  const Tensor& bv = t.val(bank);
  const Tensor& pv = t.val(pi);
  if (bv.ndim() < 2) throw DimensionError("kernel_mix: bank needs a leading mix axis");
  int64_t K = bv.shape[0];
  if (pv.numel() != K) throw DimensionError("kernel_mix: pi length != bank count");
  int64_t R = bv.numel() / K;
  std::vector<int64_t> oshape(bv.shape.begin() + 1, bv.shape.end());
  Tensor out(oshape);
  for (int64_t k = 0; k < K; ++k) {
    double w = pv.data[k];
    const double* src = &bv.data[k * R];
    for (int64_t j = 0; j < R; ++j) out.data[j] += w * src[j];
  }
  int bi = bank.id, pii = pi.id;
  bool rg = t.requires_grad(bank) || t.requires_grad(pi);
  return t.make(std::move(out), rg, [bi, pii, K, R](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& bv2 = tp.val_at(bi);
    const Tensor& pv2 = tp.val_at(pii);
    for (int64_t k = 0; k < K; ++k) {
      if (tp.rg_at(bi)) {
        double w = pv2.data[k];
        double* dst = &tp.grad_at(bi).data[k * R];
        for (int64_t j = 0; j < R; ++j) dst[j] += w * g.data[j];
      }
      if (tp.rg_at(pii)) {
        double acc = 0;
        const double* src = &bv2.data[k * R];
        for (int64_t j = 0; j < R; ++j) acc += src[j] * g.data[j];
        tp.grad_at(pii).data[k] += acc;
      }
    }
  });
}

Var softmax_xent(Var logits, const std::vector<int>& labels,
                 const std::vector<double>& weights) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.val(logits);
  if (lv.ndim() != 2) throw DimensionError("softmax_xent expects 2-D logits");
  int64_t N = lv.shape[0], C = lv.shape[1];
  if (static_cast<int64_t>(labels.size()) != N ||
      static_cast<int64_t>(weights.size()) != N)
    throw DimensionError("softmax_xent: labels/weights length mismatch");
  double loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    if (weights[n] == 0.0) continue;
    if (labels[n] < 0 || labels[n] >= C) throw DimensionError("softmax_xent: bad label");
    double mx = lv.data[n * C];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, lv.data[n * C + c]);
    double z = 0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(lv.data[n * C + c] - mx);
    loss += weights[n] * (std::log(z) + mx - lv.data[n * C + labels[n]]);
  }
  int li = logits.id;
  return t.make(Tensor({1}, {loss}), t.requires_grad(logits),
                [li, labels, weights, N, C](Tape& tp, int self) {
    if (!tp.rg_at(li)) return;
    double g = tp.grad_at(self).data[0];
    const Tensor& lv2 = tp.val_at(li);
    Tensor& gl = tp.grad_at(li);
    for (int64_t n = 0; n < N; ++n) {
      if (weights[n] == 0.0) continue;
      double mx = lv2.data[n * C];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, lv2.data[n * C + c]);
      double z = 0;
      for (int64_t c = 0; c < C; ++c) z += std::exp(lv2.data[n * C + c] - mx);
      for (int64_t c = 0; c < C; ++c) {
        double p = std::exp(lv2.data[n * C + c] - mx) / z;
        gl.data[n * C + c] += g * weights[n] * (p - (c == labels[n] ? 1.0 : 0.0));
      }
    }
  });
}

Var smooth_l1(Var pred, const Tensor& target, const std::vector<double>& weights) {
  Tape& t = *pred.tape;
  const Tensor& pv = t.val(pred);
  if (pv.ndim() != 2) throw DimensionError("smooth_l1 expects 2-D pred");
  check_same_shape(pv, target, "smooth_l1");
  int64_t N = pv.shape[0], D = pv.shape[1];
  if (static_cast<int64_t>(weights.size()) != N)
    throw DimensionError("smooth_l1: weights length mismatch");
  double loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    if (weights[n] == 0.0) continue;
    for (int64_t d = 0; d < D; ++d) {
      double e = pv.data[n * D + d] - target.data[n * D + d];
      double ae = std::abs(e);
      loss += weights[n] * (ae < 1.0 ? 0.5 * e * e : ae - 0.5);
    }
  }
  int pi = pred.id;
  Tensor tgt = target;
  return t.make(Tensor({1}, {loss}), t.requires_grad(pred),
                [pi, tgt, weights, N, D](Tape& tp, int self) {
    if (!tp.rg_at(pi)) return;
    double g = tp.grad_at(self).data[0];
    const Tensor& pv2 = tp.val_at(pi);
    Tensor& gp = tp.grad_at(pi);
    for (int64_t n = 0; n < N; ++n) {
      if (weights[n] == 0.0) continue;
      for (int64_t d = 0; d < D; ++d) {
        double e = pv2.data[n * D + d] - tgt.data[n * D + d];
        gp.data[n * D + d] += g * weights[n] * std::clamp(e, -1.0, 1.0);
      }
    }
  });
}

// ------------------------------------------------------------------- wavelets

// Block layout per 2x2 patch [a b; c d]:
//   LL = (a+b+c+d)/4   LH = (a-b+c-d)/4   HL = (a+b-c-d)/4   HH = (a-b-c+d)/4
// LL is the per-block mean, so the first 3 output channels are the half-res
// image itself. Inverse applies the same sign pattern with unit weights.
Tensor haar_squeeze_t(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("haar_squeeze expects 4-D");
  int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw DimensionError("haar_squeeze: spatial dims must be even, got " + shape_str(x.shape));
  int64_t h = H / 2, w = W / 2;
  Tensor out({N, 4 * C, h, w});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xk = 0; xk < w; ++xk) {
          double a = x.at4(n, c, 2 * y, 2 * xk);
          double b = x.at4(n, c, 2 * y, 2 * xk + 1);
          double cc = x.at4(n, c, 2 * y + 1, 2 * xk);
          double d = x.at4(n, c, 2 * y + 1, 2 * xk + 1);
          out.at4(n, c, y, xk) = (a + b + cc + d) * 0.25;
          out.at4(n, C + c, y, xk) = (a - b + cc - d) * 0.25;
          out.at4(n, 2 * C + c, y, xk) = (a + b - cc - d) * 0.25;
          out.at4(n, 3 * C + c, y, xk) = (a - b - cc + d) * 0.25;
        }
  return out;
}

Tensor haar_unsqueeze_t(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("haar_unsqueeze expects 4-D");
  int64_t N = x.shape[0], C4 = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (C4 % 4 != 0)
    throw DimensionError("haar_unsqueeze: channel count must be divisible by 4, got " +
                         shape_str(x.shape));
  int64_t C = C4 / 4;
  Tensor out({N, C, 2 * h, 2 * w});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xk = 0; xk < w; ++xk) {
          double ll = x.at4(n, c, y, xk);
          double lh = x.at4(n, C + c, y, xk);
          double hl = x.at4(n, 2 * C + c, y, xk);
          double hh = x.at4(n, 3 * C + c, y, xk);
          out.at4(n, c, 2 * y, 2 * xk) = ll + lh + hl + hh;
          out.at4(n, c, 2 * y, 2 * xk + 1) = ll - lh + hl - hh;
          out.at4(n, c, 2 * y + 1, 2 * xk) = ll + lh - hl - hh;
          out.at4(n, c, 2 * y + 1, 2 * xk + 1) = ll - lh - hl + hh;
        }
  return out;
}

Var haar_squeeze(Var x) {
  Tape& t = *x.tape;
  Tensor out = haar_squeeze_t(t.val(x));
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    // adjoint of the forward map: scatter 1/4-weighted coefficients back
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    int64_t N = gx.shape[0], C = gx.shape[1];
    int64_t h = g.shape[2], w = g.shape[3];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xk = 0; xk < w; ++xk) {
            double ll = g.at4(n, c, y, xk) * 0.25;
            double lh = g.at4(n, C + c, y, xk) * 0.25;
            double hl = g.at4(n, 2 * C + c, y, xk) * 0.25;
            double hh = g.at4(n, 3 * C + c, y, xk) * 0.25;
            gx.at4(n, c, 2 * y, 2 * xk) += ll + lh + hl + hh;
            gx.at4(n, c, 2 * y, 2 * xk + 1) += ll - lh + hl - hh;
            gx.at4(n, c, 2 * y + 1, 2 * xk) += ll + lh - hl - hh;
            gx.at4(n, c, 2 * y + 1, 2 * xk + 1) += ll - lh - hl + hh;
          }
  });
}

Var haar_unsqueeze(Var x) {
  Tape& t = *x.tape;
  Tensor out = haar_unsqueeze_t(t.val(x));
  int xi = x.id;
  return t.make(std::move(out), t.requires_grad(x), [xi](Tape& tp, int self) {
    if (!tp.rg_at(xi)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(xi);
    int64_t N = g.shape[0], C = g.shape[1];
    int64_t h = gx.shape[2], w = gx.shape[3];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xk = 0; xk < w; ++xk) {
            double a = g.at4(n, c, 2 * y, 2 * xk);
            double b = g.at4(n, c, 2 * y, 2 * xk + 1);
            double cc = g.at4(n, c, 2 * y + 1, 2 * xk);
            double d = g.at4(n, c, 2 * y + 1, 2 * xk + 1);
            gx.at4(n, c, y, xk) += a + b + cc + d;
            gx.at4(n, C + c, y, xk) += a - b + cc - d;
            gx.at4(n, 2 * C + c, y, xk) += a + b - cc - d;
            gx.at4(n, 3 * C + c, y, xk) += a - b - cc + d;
          }
  });
}

}  // namespace carnet::ag
