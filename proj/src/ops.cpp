#include "wavedepth/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "wavedepth/error.hpp"

namespace wavedepth::ops {
namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

Tape& tape_of(Var v, OpKind kind) {
  if (!v.valid()) shape_error(kind, "operand is not bound to a tape");
  return *v.tape();
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise helpers.

Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind) {
  Shape out;
  for (std::size_t i = 0; i < 4; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out.dims[i] = a[i];
    } else if (a[i] == 1) {
      out.dims[i] = b[i];
    } else {
      shape_error(kind, "extents " + a.str() + " and " + b.str() +
                            " differ at axis " + std::to_string(i));
    }
  }
  return out;
}

// Element strides of `s` when read over `out`, zero on broadcast axes.
std::array<std::size_t, 4> read_strides(const Shape& s, const Shape& out) {
  std::array<std::size_t, 4> st{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
  for (std::size_t i = 0; i < 4; ++i) {
    if (s[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F f) {
  if (a == out && b == out) {
    for (std::size_t i = 0; i < out.numel(); ++i) f(i, i, i);
    return;
  }
  const auto sa = read_strides(a, out);
  const auto sb = read_strides(b, out);
  std::size_t i = 0;
  for (std::size_t n = 0; n < out[0]; ++n) {
    for (std::size_t c = 0; c < out[1]; ++c) {
      for (std::size_t y = 0; y < out[2]; ++y) {
        const std::size_t ra = n * sa[0] + c * sa[1] + y * sa[2];
        const std::size_t rb = n * sb[0] + c * sb[1] + y * sb[2];
        for (std::size_t x = 0; x < out[3]; ++x, ++i) {
          f(i, ra + x * sa[3], rb + x * sb[3]);
        }
      }
    }
  }
}

template <typename Fwd>
Tensor binary_forward(const Tensor& a, const Tensor& b, OpKind kind, Fwd fwd) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), kind);
  Tensor out(out_shape);
  for_each_broadcast(out_shape, a.shape(), b.shape(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) {
                       out[i] = fwd(a[ia], b[ib]);
                     });
  return out;
}

// Unary elementwise op whose backward needs only input and output values.
template <typename Fwd, typename Deriv>
Var unary(OpKind kind, Var x, Fwd fwd, Deriv deriv) {
  Tape& tape = tape_of(x, kind);
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = fwd(in[i]);
  const Tensor* in_ptr = &in;
  // Saved: a reference to the input value; the output arrives with the adjoint.
  return tape.record(
      kind, std::move(out), {x},
      [in_ptr, deriv](const Tensor& g, const Tensor& y, std::span<Tensor*> grads) {
        if (!grads[0]) return;
        Tensor& gx = *grads[0];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          gx[i] += g[i] * deriv((*in_ptr)[i], y[i]);
        }
      });
}

}  // namespace

// ---------------------------------------------------------------------------
// Arithmetic.

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, OpKind::kAdd);
  Tensor out = binary_forward(a.value(), b.value(), OpKind::kAdd,
                              [](double u, double v) { return u + v; });
  const Shape sa = a.shape(), sb = b.shape();
  // Saved: operand shapes only.
  return tape.record(OpKind::kAdd, std::move(out), {a, b},
                     [sa, sb](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       for_each_broadcast(
                           g.shape(), sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) {
                             if (grads[0]) (*grads[0])[ia] += g[i];
                             if (grads[1]) (*grads[1])[ib] += g[i];
                           });
                     });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, OpKind::kSub);
  Tensor out = binary_forward(a.value(), b.value(), OpKind::kSub,
                              [](double u, double v) { return u - v; });
  const Shape sa = a.shape(), sb = b.shape();
  return tape.record(OpKind::kSub, std::move(out), {a, b},
                     [sa, sb](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       for_each_broadcast(
                           g.shape(), sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) {
                             if (grads[0]) (*grads[0])[ia] += g[i];
                             if (grads[1]) (*grads[1])[ib] -= g[i];
                           });
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, OpKind::kMul);
  Tensor out = binary_forward(a.value(), b.value(), OpKind::kMul,
                              [](double u, double v) { return u * v; });
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  // Saved: both operands.
  return tape.record(
      OpKind::kMul, std::move(out), {a, b},
      [av, bv](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        for_each_broadcast(g.shape(), av->shape(), bv->shape(),
                           [&](std::size_t i, std::size_t ia, std::size_t ib) {
                             if (grads[0]) (*grads[0])[ia] += g[i] * (*bv)[ib];
                             if (grads[1]) (*grads[1])[ib] += g[i] * (*av)[ia];
                           });
      });
}

Var scale(Var x, double s) {
  Tape& tape = tape_of(x, OpKind::kScale);
  Tensor out = x.value();
  out *= s;
  return tape.record(OpKind::kScale, std::move(out), {x},
                     [s](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       for (std::size_t i = 0; i < g.numel(); ++i) {
                         (*grads[0])[i] += s * g[i];
                       }
                     });
}

Var gate_scale(Var x, Var gate) {
  Tape& tape = tape_of(x, OpKind::kGateScale);
  if (!gate.value().is_scalar()) {
    shape_error(OpKind::kGateScale,
                "gate must be a scalar, got " + gate.shape().str());
  }
  const double w = gate.value().item();
  Tensor out = x.value();
  out *= w;
  const Tensor* xv = &x.value();
  // Saved: the input feature (for the gate adjoint) and the gate value.
  return tape.record(OpKind::kGateScale, std::move(out), {x, gate},
                     [xv, w](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       double gw = 0.0;
                       for (std::size_t i = 0; i < g.numel(); ++i) {
                         if (grads[0]) (*grads[0])[i] += w * g[i];
                         gw += g[i] * (*xv)[i];
                       }
                       if (grads[1]) (*grads[1])[0] += gw;
                     });
}

// ---------------------------------------------------------------------------
// Matrix multiply over the last two extents.

namespace {

struct MatMulDims {
  std::size_t m, k, n;
  Shape out;
};

MatMulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a[3] != b[2]) {
    shape_error(OpKind::kMatMul, "inner extents differ: " + a.str() + " x " +
                                     b.str());
  }
  Shape out;
  for (std::size_t i = 0; i < 2; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out.dims[i] = a[i];
    } else if (a[i] == 1) {
      out.dims[i] = b[i];
    } else {
      shape_error(OpKind::kMatMul, "batch extents " + a.str() + " and " +
                                       b.str() + " are not broadcastable");
    }
  }
  out.dims[2] = a[2];
  out.dims[3] = b[3];
  return {a[2], a[3], b[3], out};
}

std::size_t mat_offset(const Shape& s, std::size_t n, std::size_t c) {
  const std::size_t nn = s[0] == 1 ? 0 : n;
  const std::size_t cc = s[1] == 1 ? 0 : c;
  return (nn * s[1] + cc) * s[2] * s[3];
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, OpKind::kMatMul);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const MatMulDims d = matmul_dims(av.shape(), bv.shape());
  Tensor out(d.out);
  for (std::size_t n = 0; n < d.out[0]; ++n) {
    for (std::size_t c = 0; c < d.out[1]; ++c) {
      const double* pa = av.data() + mat_offset(av.shape(), n, c);
      const double* pb = bv.data() + mat_offset(bv.shape(), n, c);
      double* po = out.data() + mat_offset(d.out, n, c);
      for (std::size_t i = 0; i < d.m; ++i) {
        double* row = po + i * d.n;
        for (std::size_t k = 0; k < d.k; ++k) {
          const double aik = pa[i * d.k + k];
          const double* brow = pb + k * d.n;
          for (std::size_t j = 0; j < d.n; ++j) row[j] += aik * brow[j];
        }
      }
    }
  }
  const Tensor* ap = &av;
  const Tensor* bp = &bv;
  // Saved: both operands.
  return tape.record(
      OpKind::kMatMul, std::move(out), {a, b},
      [ap, bp, d](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        for (std::size_t n = 0; n < d.out[0]; ++n) {
          for (std::size_t c = 0; c < d.out[1]; ++c) {
            const double* pa = ap->data() + mat_offset(ap->shape(), n, c);
            const double* pb = bp->data() + mat_offset(bp->shape(), n, c);
            const double* pg = g.data() + mat_offset(d.out, n, c);
            if (grads[0]) {
              double* ga = grads[0]->data() + mat_offset(ap->shape(), n, c);
              for (std::size_t i = 0; i < d.m; ++i) {
                for (std::size_t k = 0; k < d.k; ++k) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < d.n; ++j) {
                    acc += pg[i * d.n + j] * pb[k * d.n + j];
                  }
                  ga[i * d.k + k] += acc;
                }
              }
            }
            if (grads[1]) {
              double* gb = grads[1]->data() + mat_offset(bp->shape(), n, c);
              for (std::size_t i = 0; i < d.m; ++i) {
                for (std::size_t k = 0; k < d.k; ++k) {
                  const double aik = pa[i * d.k + k];
                  double* row = gb + k * d.n;
                  for (std::size_t j = 0; j < d.n; ++j) {
                    row[j] += aik * pg[i * d.n + j];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 3x3 convolution.

Var conv3x3(Var x, Var weight, Var bias) {
  Tape& tape = tape_of(x, OpKind::kConv3x3);
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  const Shape& s = in.shape();
  const Shape& ws = w.shape();
  if (ws[2] != 3 || ws[3] != 3 || ws[1] != s.c()) {
    shape_error(OpKind::kConv3x3, "kernel " + ws.str() +
                                      " does not fit input " + s.str());
  }
  const std::size_t cout = ws[0];
  if (bias.shape() != Shape(1, cout, 1, 1)) {
    shape_error(OpKind::kConv3x3, "bias " + bias.shape().str() +
                                      " expected (1, " + std::to_string(cout) +
                                      ", 1, 1)");
  }
  const std::size_t H = s.h(), W = s.w(), cin = s.c();
  Tensor out(Shape(s.n(), cout, H, W));
  const Tensor& bv = bias.value();

  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* plane = out.data() + out.offset(n, co, 0, 0);
      std::fill(plane, plane + H * W, bv[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = in.data() + in.offset(n, ci, 0, 0);
        const double* k = w.data() + (co * cin + ci) * 9;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::size_t y0 = ky == 0 ? 1 : 0;
          const std::size_t y1 = ky == 2 ? H - 1 : H;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double kv = k[ky * 3 + kx];
            const std::size_t x0 = kx == 0 ? 1 : 0;
            const std::size_t x1 = kx == 2 ? W - 1 : W;
            for (std::size_t y = y0; y < y1; ++y) {
              double* orow = plane + y * W;
              const double* irow = src + (y + ky - 1) * W + (kx - 1);
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += kv * irow[xx];
            }
          }
        }
      }
    }
  }

  const Tensor* inp = &in;
  const Tensor* wp = &w;
  // Saved: input and kernel.
  return tape.record(
      OpKind::kConv3x3, std::move(out), {x, weight, bias},
      [inp, wp, cout](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        const Shape& s = inp->shape();
        const std::size_t H = s.h(), W = s.w(), cin = s.c();
        for (std::size_t n = 0; n < s.n(); ++n) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double* gp = g.data() + g.offset(n, co, 0, 0);
            if (grads[2]) {
              double acc = 0.0;
              for (std::size_t i = 0; i < H * W; ++i) acc += gp[i];
              (*grads[2])[co] += acc;
            }
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* src = inp->data() + inp->offset(n, ci, 0, 0);
              const double* k = wp->data() + (co * cin + ci) * 9;
              double* gx =
                  grads[0] ? grads[0]->data() + inp->offset(n, ci, 0, 0) : nullptr;
              double* gw = grads[1] ? grads[1]->data() + (co * cin + ci) * 9
                                    : nullptr;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t y0 = ky == 0 ? 1 : 0;
                const std::size_t y1 = ky == 2 ? H - 1 : H;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const double kv = k[ky * 3 + kx];
                  const std::size_t x0 = kx == 0 ? 1 : 0;
                  const std::size_t x1 = kx == 2 ? W - 1 : W;
                  double wacc = 0.0;
                  for (std::size_t y = y0; y < y1; ++y) {
                    const double* grow = gp + y * W;
                    const std::size_t off = (y + ky - 1) * W + (kx - 1);
                    const double* irow = src + off;
                    if (gx) {
                      double* xrow = gx + off;
                      for (std::size_t xx = x0; xx < x1; ++xx) {
                        xrow[xx] += kv * grow[xx];
                      }
                    }
                    for (std::size_t xx = x0; xx < x1; ++xx) {
                      wacc += grow[xx] * irow[xx];
                    }
                  }
                  if (gw) gw[ky * 3 + kx] += wacc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary.

Var relu(Var x) {
  return unary(
      OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var x) {
  return unary(
      OpKind::kSoftplus, x,
      [](double v) {
        return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](double in, double) {
        return in >= 0.0 ? 1.0 / (1.0 + std::exp(-in))
                         : std::exp(in) / (1.0 + std::exp(in));
      });
}

Var log(Var x) {
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.numel(); ++i) {
    if (!(in[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(in[i]) +
                        " at element " + std::to_string(i));
    }
  }
  return unary(
      OpKind::kLog, x, [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

Var abs(Var x) {
  return unary(
      OpKind::kAbs, x, [](double v) { return std::abs(v); },
      [](double in, double) {
        return in > 0.0 ? 1.0 : (in < 0.0 ? -1.0 : 0.0);
      });
}

Var sqrt(Var x) {
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.numel(); ++i) {
    if (!(in[i] >= 0.0)) {
      throw DomainError("sqrt: negative input " + std::to_string(in[i]) +
                        " at element " + std::to_string(i));
    }
  }
  return unary(
      OpKind::kSqrt, x, [](double v) { return std::sqrt(v); },
      [](double, double out) { return out > 0.0 ? 0.5 / out : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions.

Var sum(Var x) {
  Tape& tape = tape_of(x, OpKind::kSum);
  return tape.record(OpKind::kSum, Tensor::scalar(x.value().sum()), {x},
                     [](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       const double gv = g[0];
                       for (double& v : grads[0]->values()) v += gv;
                     });
}

Var mean(Var x) {
  Tape& tape = tape_of(x, OpKind::kMean);
  const std::size_t count = x.value().numel();
  if (count == 0) shape_error(OpKind::kMean, "empty input");
  const double inv = 1.0 / static_cast<double>(count);
  return tape.record(OpKind::kMean, Tensor::scalar(x.value().sum() * inv), {x},
                     [inv](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       const double gv = g[0] * inv;
                       for (double& v : grads[0]->values()) v += gv;
                     });
}

// ---------------------------------------------------------------------------
// Normalization.

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = tape_of(x, OpKind::kLayerNorm);
  const Tensor& in = x.value();
  const std::size_t D = in.shape().w();
  const Shape ps(1, 1, 1, D);
  if (gamma.shape() != ps || beta.shape() != ps) {
    shape_error(OpKind::kLayerNorm, "affine parameters must be " + ps.str() +
                                        ", got " + gamma.shape().str() +
                                        " and " + beta.shape().str());
  }
  const std::size_t rows = in.numel() / D;
  Tensor out(in.shape());
  Tensor xhat(in.shape());
  std::vector<double> rstd(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = in.data() + r * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += p[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      const double h = (p[j] - mu) * rstd[r];
      xhat[r * D + j] = h;
      out[r * D + j] = gv[j] * h + bv[j];
    }
  }
  const Tensor* gp = &gv;
  // Saved: normalized input and per-row inverse deviation.
  return tape.record(
      OpKind::kLayerNorm, std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), gp, D, rows](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        std::vector<double> dh(D);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * D;
          const double* hr = xhat.data() + r * D;
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            dh[j] = gr[j] * (*gp)[j];
            sum_dh += dh[j];
            sum_dh_h += dh[j] * hr[j];
            if (grads[1]) (*grads[1])[j] += gr[j] * hr[j];
            if (grads[2]) (*grads[2])[j] += gr[j];
          }
          if (grads[0]) {
            const double inv_d = 1.0 / static_cast<double>(D);
            double* gx = grads[0]->data() + r * D;
            for (std::size_t j = 0; j < D; ++j) {
              gx[j] += rstd[r] * (dh[j] - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
            }
          }
        }
      });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool train) {
  Tape& tape = tape_of(x, OpKind::kBatchNorm);
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  const Shape ps(1, s.c(), 1, 1);
  if (gamma.shape() != ps || beta.shape() != ps) {
    shape_error(OpKind::kBatchNorm, "affine parameters must be " + ps.str());
  }
  if (state.running_mean.shape() != ps || state.running_var.shape() != ps) {
    shape_error(OpKind::kBatchNorm, "running statistics must be " + ps.str());
  }
  if (train && s.n() < 2) {
    throw ContractError("batch_norm: training mode requires batch >= 2, got " +
                        std::to_string(s.n()));
  }
  const std::size_t C = s.c(), plane = s.h() * s.w();
  const double count = static_cast<double>(s.n() * plane);
  Tensor out(s);
  Tensor xhat(s);
  std::vector<double> rstd(C);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      mu = 0.0;
      for (std::size_t n = 0; n < s.n(); ++n) {
        const double* p = in.data() + in.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) mu += p[i];
      }
      mu /= count;
      var = 0.0;
      for (std::size_t n = 0; n < s.n(); ++n) {
        const double* p = in.data() + in.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= count;
      const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
      state.running_mean[c] =
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] +
                             state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    rstd[c] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t n = 0; n < s.n(); ++n) {
      const std::size_t base = in.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (in[base + i] - mu) * rstd[c];
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }
  }
  const Tensor* gp = &gv;
  // Saved: normalized input and per-channel inverse deviation; in eval mode
  // the statistics are constants so the input adjoint is a plain scaling.
  return tape.record(
      OpKind::kBatchNorm, std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), gp, train, count](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        const Shape& s = g.shape();
        const std::size_t plane = s.h() * s.w();
        for (std::size_t c = 0; c < s.c(); ++c) {
          double sum_g = 0.0, sum_g_h = 0.0;
          for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = g.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += g[base + i];
              sum_g_h += g[base + i] * xhat[base + i];
            }
          }
          if (grads[1]) (*grads[1])[c] += sum_g_h;
          if (grads[2]) (*grads[2])[c] += sum_g;
          if (!grads[0]) continue;
          const double k = (*gp)[c] * rstd[c];
          for (std::size_t n = 0; n < s.n(); ++n) {
            const std::size_t base = g.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
              const double gi = g[base + i];
              (*grads[0])[base + i] +=
                  train ? k * (gi - sum_g / count - xhat[base + i] * sum_g_h / count)
                        : k * gi;
            }
          }
        }
      });
}

Var softmax(Var x) {
  Tape& tape = tape_of(x, OpKind::kSoftmax);
  const Tensor& in = x.value();
  const std::size_t D = in.shape().w();
  const std::size_t rows = D == 0 ? 0 : in.numel() / D;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = in.data() + r * D;
    double* o = out.data() + r * D;
    const double mx = *std::max_element(p, p + D);
    double z = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      o[j] = std::exp(p[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < D; ++j) o[j] /= z;
  }
  // Saved: nothing extra; the backward reads the output probabilities.
  return tape.record(OpKind::kSoftmax, std::move(out), {x},
                     [D, rows](const Tensor& g, const Tensor& y_all,
                               std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = y_all.data() + r * D;
                         const double* gr = g.data() + r * D;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < D; ++j) dot += gr[j] * y[j];
                         double* gx = grads[0]->data() + r * D;
                         for (std::size_t j = 0; j < D; ++j) {
                           gx[j] += y[j] * (gr[j] - dot);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Finite differences and colour conversion.

Var diff_x(Var x) {
  Tape& tape = tape_of(x, OpKind::kDiffX);
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  if (s.w() < 1) shape_error(OpKind::kDiffX, "zero width in " + s.str());
  const std::size_t W = s.w(), Wo = W - 1;
  Tensor out(Shape(s.n(), s.c(), s.h(), Wo));
  const std::size_t rows = s.n() * s.c() * s.h();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < Wo; ++i) {
      out[r * Wo + i] = in[r * W + i + 1] - in[r * W + i];
    }
  }
  // Saved: nothing (linear).
  return tape.record(OpKind::kDiffX, std::move(out), {x},
                     [rows, W, Wo](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       Tensor& gx = *grads[0];
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t i = 0; i < Wo; ++i) {
                           gx[r * W + i + 1] += g[r * Wo + i];
                           gx[r * W + i] -= g[r * Wo + i];
                         }
                       }
                     });
}

Var diff_y(Var x) {
  Tape& tape = tape_of(x, OpKind::kDiffY);
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  if (s.h() < 1) shape_error(OpKind::kDiffY, "zero height in " + s.str());
  const std::size_t H = s.h(), W = s.w(), Ho = H - 1;
  const std::size_t planes = s.n() * s.c();
  Tensor out(Shape(s.n(), s.c(), Ho, W));
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t i = 0; i < W; ++i) {
        out[(p * Ho + y) * W + i] =
            in[(p * H + y + 1) * W + i] - in[(p * H + y) * W + i];
      }
    }
  }
  return tape.record(
      OpKind::kDiffY, std::move(out), {x},
      [planes, H, W, Ho](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        if (!grads[0]) return;
        Tensor& gx = *grads[0];
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t i = 0; i < W; ++i) {
              const double gv = g[(p * Ho + y) * W + i];
              gx[(p * H + y + 1) * W + i] += gv;
              gx[(p * H + y) * W + i] -= gv;
            }
          }
        }
      });
}

Var grayscale(Var rgb) {
  Tape& tape = tape_of(rgb, OpKind::kGrayscale);
  static constexpr double kWeights[3] = {0.299, 0.587, 0.114};
  const Tensor& in = rgb.value();
  const Shape& s = in.shape();
  if (s.c() != 3) {
    shape_error(OpKind::kGrayscale, "expected 3 channels, got " + s.str());
  }
  const std::size_t plane = s.h() * s.w();
  Tensor out(Shape(s.n(), 1, s.h(), s.w()));
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        acc += kWeights[c] * in[in.offset(n, c, 0, 0) + i];
      }
      out[n * plane + i] = acc;
    }
  }
  return tape.record(OpKind::kGrayscale, std::move(out), {rgb},
                     [s, plane](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       for (std::size_t n = 0; n < s.n(); ++n) {
                         for (std::size_t c = 0; c < 3; ++c) {
                           double* gx = grads[0]->data() + ((n * 3 + c) * plane);
                           for (std::size_t i = 0; i < plane; ++i) {
                             gx[i] += kWeights[c] * g[n * plane + i];
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Wavelet analysis / synthesis.

Var dwt2_band(Var x, Band band) {
  Tape& tape = tape_of(x, OpKind::kDwt2Band);
  SubbandSet s = dwt2(x.value());
  Tensor out = std::move(s.band(band));
  const std::size_t H = s.height, W = s.width;
  // Saved: nothing beyond the analysed extents (linear).
  return tape.record(OpKind::kDwt2Band, std::move(out), {x},
                     [band, H, W](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       SubbandSet gs;
                       for (Band b : kAllBands) gs.band(b) = Tensor(g.shape());
                       gs.band(band) = g;
                       gs.height = H;
                       gs.width = W;
                       *grads[0] += dwt2_transpose(gs);
                     });
}

Var idwt2(Var ll, Var lh, Var hl, Var hh, std::size_t height,
          std::size_t width) {
  Tape& tape = tape_of(ll, OpKind::kIdwt2);
  SubbandSet s{ll.value(), lh.value(), hl.value(), hh.value(), height, width};
  Tensor out = wavedepth::idwt2(s);
  return tape.record(OpKind::kIdwt2, std::move(out), {ll, lh, hl, hh},
                     [height, width](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       SubbandSet gs = idwt2_transpose(g, height, width);
                       for (std::size_t i = 0; i < 4; ++i) {
                         if (grads[i]) *grads[i] += gs.band(kAllBands[i]);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Layout.

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x, OpKind::kReshape);
  if (shape.numel() != x.value().numel()) {
    shape_error(OpKind::kReshape,
                "cannot view " + x.shape().str() + " as " + shape.str());
  }
  const Shape in_shape = x.shape();
  return tape.record(OpKind::kReshape, x.value().reshaped(shape), {x},
                     [in_shape](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (grads[0]) *grads[0] += g.reshaped(in_shape);
                     });
}

Var permute(Var x, std::array<std::size_t, 4> perm) {
  Tape& tape = tape_of(x, OpKind::kPermute);
  std::array<bool, 4> seen{};
  for (std::size_t p : perm) {
    if (p > 3 || seen[p]) {
      shape_error(OpKind::kPermute, "axis order is not a permutation of 0..3");
    }
    seen[p] = true;
  }
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  const std::array<std::size_t, 4> in_strides{s[1] * s[2] * s[3], s[2] * s[3],
                                              s[3], 1};
  Shape os;
  std::array<std::size_t, 4> st{};
  for (std::size_t i = 0; i < 4; ++i) {
    os.dims[i] = s[perm[i]];
    st[i] = in_strides[perm[i]];
  }
  auto for_each = [os, st](auto f) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < os[0]; ++a)
      for (std::size_t b = 0; b < os[1]; ++b)
        for (std::size_t c = 0; c < os[2]; ++c)
          for (std::size_t d = 0; d < os[3]; ++d, ++o)
            f(o, a * st[0] + b * st[1] + c * st[2] + d * st[3]);
  };
  Tensor out(os);
  for_each([&](std::size_t o, std::size_t i) { out[o] = in[i]; });
  return tape.record(OpKind::kPermute, std::move(out), {x},
                     [for_each](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       Tensor& gx = *grads[0];
                       for_each([&](std::size_t o, std::size_t i) { gx[i] += g[o]; });
                     });
}

Var patchify(Var x, std::size_t patch) {
  Tape& tape = tape_of(x, OpKind::kPatchify);
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  if (patch == 0 || s.h() % patch != 0 || s.w() % patch != 0) {
    shape_error(OpKind::kPatchify, "patch " + std::to_string(patch) +
                                       " does not tile " + s.str());
  }
  const std::size_t gh = s.h() / patch, gw = s.w() / patch;
  const std::size_t feat = s.c() * patch * patch;
  // Flat source index for every output element.
  std::vector<std::size_t> src(s.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n(); ++n)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx)
        for (std::size_t c = 0; c < s.c(); ++c)
          for (std::size_t iy = 0; iy < patch; ++iy)
            for (std::size_t ix = 0; ix < patch; ++ix)
              src[o++] = in.offset(n, c, ty * patch + iy, tx * patch + ix);
  Tensor out(Shape(s.n(), 1, gh * gw, feat));
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = in[src[i]];
  return tape.record(OpKind::kPatchify, std::move(out), {x},
                     [src = std::move(src)](const Tensor& g, const Tensor&,
                                            std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       for (std::size_t i = 0; i < src.size(); ++i) {
                         (*grads[0])[src[i]] += g[i];
                       }
                     });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Half-pixel-centred 2x bilinear taps along one axis of length `len`.
std::vector<Tap> upsample_taps(std::size_t len) {
  std::vector<Tap> taps(2 * len);
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t prev = i == 0 ? 0 : i - 1;
    const std::size_t next = i + 1 < len ? i + 1 : len - 1;
    taps[2 * i] = {prev, i, 0.25, 0.75};
    taps[2 * i + 1] = {i, next, 0.75, 0.25};
  }
  return taps;
}

}  // namespace

Var upsample2x(Var x) {
  Tape& tape = tape_of(x, OpKind::kUpsample2x);
  const Tensor& in = x.value();
  const Shape& s = in.shape();
  if (s.h() == 0 || s.w() == 0) {
    shape_error(OpKind::kUpsample2x, "zero spatial extent in " + s.str());
  }
  const auto ty = upsample_taps(s.h());
  const auto tx = upsample_taps(s.w());
  const Shape os(s.n(), s.c(), 2 * s.h(), 2 * s.w());
  Tensor out(os);
  const std::size_t planes = s.n() * s.c();
  const std::size_t H = s.h(), W = s.w(), Ho = os.h(), Wo = os.w();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = in.data() + p * H * W;
    double* dst = out.data() + p * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const Tap& a = ty[oy];
      const double* r0 = src + a.lo * W;
      const double* r1 = src + a.hi * W;
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const Tap& b = tx[ox];
        dst[oy * Wo + ox] = a.w_lo * (b.w_lo * r0[b.lo] + b.w_hi * r0[b.hi]) +
                            a.w_hi * (b.w_lo * r1[b.lo] + b.w_hi * r1[b.hi]);
      }
    }
  }
  // Saved: tap tables only (linear).
  return tape.record(
      OpKind::kUpsample2x, std::move(out), {x},
      [ty, tx, planes, H, W, Ho, Wo](const Tensor& g, const Tensor&, std::span<Tensor*> grads) {
        if (!grads[0]) return;
        for (std::size_t p = 0; p < planes; ++p) {
          double* dst = grads[0]->data() + p * H * W;
          const double* gp = g.data() + p * Ho * Wo;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const Tap& b = tx[ox];
              const double gv = gp[oy * Wo + ox];
              dst[a.lo * W + b.lo] += gv * a.w_lo * b.w_lo;
              dst[a.lo * W + b.hi] += gv * a.w_lo * b.w_hi;
              dst[a.hi * W + b.lo] += gv * a.w_hi * b.w_lo;
              dst[a.hi * W + b.hi] += gv * a.w_hi * b.w_hi;
            }
          }
        }
      });
}

Var gather(Var x, std::vector<std::size_t> indices) {
  Tape& tape = tape_of(x, OpKind::kGather);
  const Tensor& in = x.value();
  Tensor out(Shape(1, 1, 1, indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= in.numel()) {
      shape_error(OpKind::kGather, "index " + std::to_string(indices[i]) +
                                       " out of range for " + in.shape().str());
    }
    out[i] = in[indices[i]];
  }
  return tape.record(OpKind::kGather, std::move(out), {x},
                     [idx = std::move(indices)](const Tensor& g, const Tensor&,
                                                std::span<Tensor*> grads) {
                       if (!grads[0]) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         (*grads[0])[idx[i]] += g[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Dispatch.

std::size_t op_arity(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return 0;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kMatMul:
    case OpKind::kGateScale: return 2;
    case OpKind::kConv3x3:
    case OpKind::kLayerNorm:
    case OpKind::kBatchNorm: return 3;
    case OpKind::kIdwt2: return 4;
    default: return 1;
  }
}

Var forward_op(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
  if (in.size() != op_arity(kind)) {
    throw ContractError(std::string(op_name(kind)) + ": expected " +
                        std::to_string(op_arity(kind)) + " operands, got " +
                        std::to_string(in.size()));
  }
  switch (kind) {
    case OpKind::kLeaf: break;
    case OpKind::kAdd: return add(in[0], in[1]);
    case OpKind::kSub: return sub(in[0], in[1]);
    case OpKind::kMul: return mul(in[0], in[1]);
    case OpKind::kScale: return scale(in[0], attrs.scalar);
    case OpKind::kMatMul: return matmul(in[0], in[1]);
    case OpKind::kConv3x3: return conv3x3(in[0], in[1], in[2]);
    case OpKind::kRelu: return relu(in[0]);
    case OpKind::kSoftplus: return softplus(in[0]);
    case OpKind::kLog: return log(in[0]);
    case OpKind::kAbs: return abs(in[0]);
    case OpKind::kMean: return mean(in[0]);
    case OpKind::kSum: return sum(in[0]);
    case OpKind::kSqrt: return sqrt(in[0]);
    case OpKind::kLayerNorm: return layer_norm(in[0], in[1], in[2]);
    case OpKind::kBatchNorm:
      if (attrs.bn_state == nullptr) {
        throw ContractError("batch_norm: missing running-statistics state");
      }
      return batch_norm(in[0], in[1], in[2], *attrs.bn_state, attrs.train);
    case OpKind::kSoftmax: return softmax(in[0]);
    case OpKind::kDiffX: return diff_x(in[0]);
    case OpKind::kDiffY: return diff_y(in[0]);
    case OpKind::kGrayscale: return grayscale(in[0]);
    case OpKind::kDwt2Band: return dwt2_band(in[0], attrs.band);
    case OpKind::kIdwt2:
      return idwt2(in[0], in[1], in[2], in[3], attrs.shape.h(),
                   attrs.shape.w());
    case OpKind::kGateScale: return gate_scale(in[0], in[1]);
    case OpKind::kReshape: return reshape(in[0], attrs.shape);
    case OpKind::kPermute: return permute(in[0], attrs.perm);
    case OpKind::kPatchify: return patchify(in[0], attrs.patch);
    case OpKind::kUpsample2x: return upsample2x(in[0]);
    case OpKind::kGather: return gather(in[0], attrs.indices);
  }
  throw ContractError("forward_op: leaf is not an operator");
}

}  // namespace wavedepth::ops
