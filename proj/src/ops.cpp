#include "mkunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mkunet {

namespace {

enum class Broadcast { same, per_channel, per_pixel };

Broadcast classify(const Shape4& a, const Shape4& b) {
  if (a == b) return Broadcast::same;
  if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return Broadcast::per_channel;
  if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return Broadcast::per_pixel;
  throw ShapeError("incompatible shapes for broadcast: " + a.str() + " and " + b.str());
}

template <typename Scalar>
Index broadcast_index(const Shape4& a, Broadcast kind, Index n, Index c, Index pix) {
  switch (kind) {
    case Broadcast::same:
      return (n * a.c + c) * a.plane() + pix;
    case Broadcast::per_channel:
      return n * a.c + c;
    case Broadcast::per_pixel:
      return n * a.plane() + pix;
  }
  return 0;
}

template <typename Scalar, typename Fn>
void for_each_broadcast(const Shape4& s, Broadcast kind, Fn&& fn) {
  Index i = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index p = 0; p < s.plane(); ++p, ++i) fn(i, broadcast_index<Scalar>(s, kind, n, c, p));
}

template <typename Scalar>
bool wants_grad(const Node<Scalar>& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}

struct AxisSample {
  Index i0;
  Index i1;
  double lambda;
};

std::vector<AxisSample> bilinear_axis(Index in, Index out) {
  std::vector<AxisSample> axis(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<Index>(std::floor(src));
    const Index i1 = std::min(i0 + 1, in - 1);
    axis[static_cast<std::size_t>(d)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return axis;
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape4 s = a.shape();
  const Broadcast kind = classify(s, b.shape());
  Tensor4<Scalar> out = a.value();
  if (kind == Broadcast::same) {
    out.array() += b.value().array();
  } else {
    const auto& bv = b.value();
    for_each_broadcast<Scalar>(s, kind, [&](Index i, Index j) { out[i] += bv[j]; });
  }
  return make_result<Scalar>(std::move(out), {a, b}, "add", [s, kind](Node<Scalar>& self) {
    const auto& dy = *self.grad;
    if (wants_grad(self, 0)) self.inputs[0]->grad_buffer().array() += dy.array();
    if (wants_grad(self, 1)) {
      auto& db = self.inputs[1]->grad_buffer();
      if (kind == Broadcast::same) {
        db.array() += dy.array();
      } else {
        for_each_broadcast<Scalar>(s, kind, [&](Index i, Index j) { db[j] += dy[i]; });
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape4 s = a.shape();
  const Broadcast kind = classify(s, b.shape());
  Tensor4<Scalar> out = a.value();
  if (kind == Broadcast::same) {
    out.array() *= b.value().array();
  } else {
    const auto& bv = b.value();
    for_each_broadcast<Scalar>(s, kind, [&](Index i, Index j) { out[i] *= bv[j]; });
  }
  return make_result<Scalar>(std::move(out), {a, b}, "hadamard", [s, kind](Node<Scalar>& self) {
    const auto& dy = *self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (wants_grad(self, 0)) {
      auto& da = self.inputs[0]->grad_buffer();
      if (kind == Broadcast::same) {
        da.array() += dy.array() * bv.array();
      } else {
        for_each_broadcast<Scalar>(s, kind, [&](Index i, Index j) { da[i] += dy[i] * bv[j]; });
      }
    }
    if (wants_grad(self, 1)) {
      auto& db = self.inputs[1]->grad_buffer();
      if (kind == Broadcast::same) {
        db.array() += dy.array() * av.array();
      } else {
        for_each_broadcast<Scalar>(s, kind, [&](Index i, Index j) { db[j] += dy[i] * av[i]; });
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor4<Scalar> out(Shape4{1, 1, 1, 1}, x.value().array().sum());
  return make_result<Scalar>(std::move(out), {x}, "sum", [](Node<Scalar>& self) {
    self.inputs[0]->grad_buffer().array() += (*self.grad)[0];
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  const auto& xv = x.value();
  if (auto* rec = active_kink_recorder()) {
    PatternHash h;
    for (Index i = 0; i < xv.size(); ++i) h.add(xv[i] > 0);
    rec->record(h.value());
  }
  Tensor4<Scalar> out(xv.shape());
  out.array() = xv.array().max(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, "relu", [](Node<Scalar>& self) {
    const auto& in = self.inputs[0]->value;
    self.inputs[0]->grad_buffer().array() +=
        (in.array() > Scalar(0)).select(self.grad->array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> relu6(const Var<Scalar>& x) {
  const auto& xv = x.value();
  if (auto* rec = active_kink_recorder()) {
    PatternHash h;
    for (Index i = 0; i < xv.size(); ++i) h.add_word((xv[i] > 0 ? 1u : 0u) | (xv[i] < 6 ? 2u : 0u));
    rec->record(h.value());
  }
  Tensor4<Scalar> out(xv.shape());
  out.array() = xv.array().max(Scalar(0)).min(Scalar(6));
  return make_result<Scalar>(std::move(out), {x}, "relu6", [](Node<Scalar>& self) {
    const auto& in = self.inputs[0]->value.array();
    self.inputs[0]->grad_buffer().array() +=
        ((in > Scalar(0)) && (in < Scalar(6))).select(self.grad->array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor4<Scalar> out(x.shape());
  out.array() = Scalar(1) / (Scalar(1) + (-x.value().array()).exp());
  return make_result<Scalar>(std::move(out), {x}, "sigmoid", [](Node<Scalar>& self) {
    const auto& y = self.value.array();
    self.inputs[0]->grad_buffer().array() += self.grad->array() * y * (Scalar(1) - y);
  });
}

// ---- convolution ----------------------------------------------------------

Index conv_out_extent(Index in, Index kernel, Index stride, Index padding) {
  if (stride < 1 || padding < 0) throw ShapeError("conv stride must be >= 1 and padding >= 0");
  if (in + 2 * padding < kernel) {
    throw ShapeError("kernel " + std::to_string(kernel) + " does not fit extent " +
                     std::to_string(in) + " with padding " + std::to_string(padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  Index n, c_in, h, w;
  Index c_out, k, oh, ow;
  Index stride, pad, groups;
  Index cin_g, cout_g;

  [[nodiscard]] bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  [[nodiscard]] bool depthwise() const { return cin_g == 1 && cout_g == 1; }
  [[nodiscard]] Index col_rows() const { return cin_g * k * k; }
  [[nodiscard]] Index out_plane() const { return oh * ow; }
};

// Valid output-column range [lo, hi) for kernel offset `koff` along one axis.
inline std::pair<Index, Index> valid_range(Index in, Index out, Index stride, Index pad,
                                           Index koff) {
  const Index shift = pad - koff;
  Index lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  const Index m = in - 1 + pad - koff;
  Index hi = m < 0 ? 0 : std::min(out, m / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* col) {
  const Index op = g.out_plane();
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx) {
        Scalar* row = col + ((ci * g.k + ky) * g.k + kx) * op;
        std::fill(row, row + op, Scalar(0));
        const auto [xlo, xhi] = valid_range(g.w, g.ow, g.stride, g.pad, kx);
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = x + (ci * g.h + iy) * g.w;
          Scalar* dst = row + oy * g.ow;
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride - g.pad + kx];
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeometry& g, Scalar* dx) {
  const Index op = g.out_plane();
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    for (Index ky = 0; ky < g.k; ++ky) {
      for (Index kx = 0; kx < g.k; ++kx) {
        const Scalar* row = col + ((ci * g.k + ky) * g.k + kx) * op;
        const auto [xlo, xhi] = valid_range(g.w, g.ow, g.stride, g.pad, kx);
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst = dx + (ci * g.h + iy) * g.w;
          const Scalar* src = row + oy * g.ow;
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox * g.stride - g.pad + kx] += src[ox];
        }
      }
    }
  }
}

template <typename Scalar>
void depthwise_forward(const Scalar* x, const Scalar* wt, const ConvGeometry& g, Scalar* y) {
  for (Index ky = 0; ky < g.k; ++ky) {
    for (Index kx = 0; kx < g.k; ++kx) {
      const Scalar wv = wt[ky * g.k + kx];
      const auto [xlo, xhi] = valid_range(g.w, g.ow, g.stride, g.pad, kx);
      for (Index oy = 0; oy < g.oh; ++oy) {
        const Index iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.h) continue;
        const Scalar* src = x + iy * g.w - g.pad + kx;
        Scalar* dst = y + oy * g.ow;
        if (g.stride == 1) {
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox];
        } else {
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox * g.stride];
        }
      }
    }
  }
}

template <typename Scalar>
void depthwise_backward(const Scalar* x, const Scalar* wt, const Scalar* dy, const ConvGeometry& g,
                        Scalar* dx, Scalar* dw) {
  for (Index ky = 0; ky < g.k; ++ky) {
    for (Index kx = 0; kx < g.k; ++kx) {
      const Scalar wv = wt[ky * g.k + kx];
      Scalar acc = 0;
      const auto [xlo, xhi] = valid_range(g.w, g.ow, g.stride, g.pad, kx);
      for (Index oy = 0; oy < g.oh; ++oy) {
        const Index iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.h) continue;
        const Index base = iy * g.w - g.pad + kx;
        const Scalar* grow = dy + oy * g.ow;
        for (Index ox = xlo; ox < xhi; ++ox) {
          const Index ix = base + ox * g.stride;
          acc += grow[ox] * x[ix];
          if (dx) dx[ix] += wv * grow[ox];
        }
      }
      if (dw) dw[ky * g.k + kx] += acc;
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight,
                   const std::optional<Var<Scalar>>& bias, const ConvSpec& spec) {
  using Matrix = typename Tensor4<Scalar>::Matrix;
  using Map = Eigen::Map<Matrix>;
  using CMap = Eigen::Map<const Matrix>;

  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (spec.groups < 1 || xs.c % spec.groups != 0 || ws.n % spec.groups != 0) {
    throw ShapeError("groups " + std::to_string(spec.groups) + " must divide c_in " +
                     std::to_string(xs.c) + " and c_out " + std::to_string(ws.n));
  }
  if (ws.c * spec.groups != xs.c) {
    throw ShapeError("conv weight " + ws.str() + " does not match input channels " +
                     std::to_string(xs.c) + " with groups " + std::to_string(spec.groups));
  }
  if (ws.h != ws.w) throw ShapeError("only square kernels are supported");
  if (bias && bias->shape() != Shape4{1, ws.n, 1, 1}) {
    throw ShapeError("conv bias must have shape (1,c_out,1,1), got " + bias->shape().str());
  }

  ConvGeometry g{};
  g.n = xs.n;
  g.c_in = xs.c;
  g.h = xs.h;
  g.w = xs.w;
  g.c_out = ws.n;
  g.k = ws.h;
  g.stride = spec.stride;
  g.pad = spec.padding;
  g.groups = spec.groups;
  g.oh = conv_out_extent(xs.h, g.k, spec.stride, spec.padding);
  g.ow = conv_out_extent(xs.w, g.k, spec.stride, spec.padding);
  g.cin_g = xs.c / spec.groups;
  g.cout_g = ws.n / spec.groups;

  Tensor4<Scalar> out(Shape4{g.n, g.c_out, g.oh, g.ow});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const Index in_plane = g.h * g.w;
  const Index op = g.out_plane();

  parallel_for(g.n, [&](Index n) {
    Matrix col;
    for (Index grp = 0; grp < g.groups; ++grp) {
      const Scalar* xg = xv.plane(n, grp * g.cin_g);
      Scalar* yg = out.plane(n, grp * g.cout_g);
      const Scalar* wg = wv.data() + grp * g.cout_g * g.col_rows();
      if (g.depthwise() && !g.pointwise()) {
        depthwise_forward(xg, wg, g, yg);
      } else if (g.pointwise()) {
        Map(yg, g.cout_g, op).noalias() =
            CMap(wg, g.cout_g, g.cin_g) * CMap(xg, g.cin_g, in_plane);
      } else {
        col.resize(g.col_rows(), op);
        im2col(xg, g, col.data());
        Map(yg, g.cout_g, op).noalias() = CMap(wg, g.cout_g, g.col_rows()) * col;
      }
    }
    if (bias) {
      for (Index o = 0; o < g.c_out; ++o) {
        Scalar* p = out.plane(n, o);
        const Scalar b = bias->value()[o];
        for (Index i = 0; i < op; ++i) p[i] += b;
      }
    }
  });

  std::vector<Var<Scalar>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();

  return make_result<Scalar>(std::move(out), std::move(inputs), "conv2d",
                             [g, has_bias](Node<Scalar>& self) {
    const auto& dy = *self.grad;
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    const bool need_dx = self.inputs[0]->requires_grad;
    const bool need_dw = self.inputs[1]->requires_grad;
    const Index in_plane = g.h * g.w;
    const Index op = g.out_plane();
    const Index wsize = wv.size();

    Tensor4<Scalar>* dx = need_dx ? &self.inputs[0]->grad_buffer() : nullptr;
    // Per-sample weight grads, reduced in sample order below.
    std::vector<Tensor4<Scalar>> partial;
    if (need_dw) partial.assign(static_cast<std::size_t>(g.n), Tensor4<Scalar>(wv.shape()));

    parallel_for(g.n, [&](Index n) {
      Matrix col;
      Matrix dcol;
      for (Index grp = 0; grp < g.groups; ++grp) {
        const Scalar* xg = xv.plane(n, grp * g.cin_g);
        const Scalar* dyg = dy.plane(n, grp * g.cout_g);
        const Scalar* wg = wv.data() + grp * g.cout_g * g.col_rows();
        Scalar* dxg = dx ? dx->plane(n, grp * g.cin_g) : nullptr;
        Scalar* dwg = need_dw ? partial[static_cast<std::size_t>(n)].data() +
                                    grp * g.cout_g * g.col_rows()
                              : nullptr;
        if (g.depthwise() && !g.pointwise()) {
          depthwise_backward(xg, wg, dyg, g, dxg, dwg);
        } else if (g.pointwise()) {
          CMap dY(dyg, g.cout_g, op);
          if (dwg) Map(dwg, g.cout_g, g.cin_g).noalias() += dY * CMap(xg, g.cin_g, in_plane).transpose();
          if (dxg) Map(dxg, g.cin_g, in_plane).noalias() += CMap(wg, g.cout_g, g.cin_g).transpose() * dY;
        } else {
          CMap dY(dyg, g.cout_g, op);
          col.resize(g.col_rows(), op);
          im2col(xg, g, col.data());
          if (dwg) Map(dwg, g.cout_g, g.col_rows()).noalias() += dY * col.transpose();
          if (dxg) {
            dcol.noalias() = CMap(wg, g.cout_g, g.col_rows()).transpose() * dY;
            col2im_add(dcol.data(), g, dxg);
          }
        }
      }
    });

    if (need_dw) {
      auto& dw = self.inputs[1]->grad_buffer();
      for (const auto& p : partial) dw.array() += p.array();
      (void)wsize;
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& db = self.inputs[2]->grad_buffer();
      for (Index n = 0; n < g.n; ++n) {
        for (Index o = 0; o < g.c_out; ++o) {
          const Scalar* p = dy.plane(n, o);
          Scalar acc = 0;
          for (Index i = 0; i < op; ++i) acc += p[i];
          db[o] += acc;
        }
      }
    }
  });
}

// ---- batch norm -----------------------------------------------------------

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       RunningStats<Scalar>& stats, Mode mode) {
  const Shape4 s = x.shape();
  const Shape4 ps{1, s.c, 1, 1};
  if (gamma.shape() != ps || beta.shape() != ps || stats.mean.shape() != ps) {
    throw ShapeError("batch_norm channel mismatch: input " + s.str() + ", params " +
                     gamma.shape().str());
  }
  const Index count = s.n * s.plane();
  if (mode == Mode::train && count == 1) {
    throw ShapeError("batch_norm in train mode needs more than one value per channel");
  }
  const auto& xv = x.value();
  Tensor4<Scalar> xhat(s);
  Tensor4<Scalar> invstd(ps);
  for (Index c = 0; c < s.c; ++c) {
    double mean;
    double var;
    if (mode == Mode::train) {
      double acc = 0;
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = xv.plane(n, c);
        for (Index i = 0; i < s.plane(); ++i) acc += p[i];
      }
      mean = acc / static_cast<double>(count);
      double sq = 0;
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = xv.plane(n, c);
        for (Index i = 0; i < s.plane(); ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double m = stats.momentum;
      stats.mean[c] = static_cast<Scalar>((1 - m) * stats.mean[c] + m * mean);
      stats.var[c] = static_cast<Scalar>((1 - m) * stats.var[c] + m * var);
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    const double is = 1.0 / std::sqrt(var + stats.epsilon);
    invstd[c] = static_cast<Scalar>(is);
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* p = xv.plane(n, c);
      Scalar* q = xhat.plane(n, c);
      for (Index i = 0; i < s.plane(); ++i) q[i] = static_cast<Scalar>((p[i] - mean) * is);
    }
  }
  Tensor4<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar gm = gamma.value()[c];
      const Scalar bt = beta.value()[c];
      const Scalar* q = xhat.plane(n, c);
      Scalar* o = out.plane(n, c);
      for (Index i = 0; i < s.plane(); ++i) o[i] = gm * q[i] + bt;
    }
  }
  return make_result<Scalar>(
      std::move(out), {x, gamma, beta}, "batch_norm",
      [s, mode, count, xhat = std::move(xhat), invstd = std::move(invstd)](Node<Scalar>& self) {
        const auto& dy = *self.grad;
        const auto& gm = self.inputs[1]->value;
        Tensor4<Scalar> dgamma(Shape4{1, s.c, 1, 1});
        Tensor4<Scalar> dbeta(Shape4{1, s.c, 1, 1});
        for (Index c = 0; c < s.c; ++c) {
          double sg = 0;
          double sb = 0;
          for (Index n = 0; n < s.n; ++n) {
            const Scalar* g = dy.plane(n, c);
            const Scalar* q = xhat.plane(n, c);
            for (Index i = 0; i < s.plane(); ++i) {
              sb += g[i];
              sg += g[i] * q[i];
            }
          }
          dgamma[c] = static_cast<Scalar>(sg);
          dbeta[c] = static_cast<Scalar>(sb);
        }
        if (self.inputs[0]->requires_grad) {
          auto& dx = self.inputs[0]->grad_buffer();
          for (Index c = 0; c < s.c; ++c) {
            const double scale = static_cast<double>(gm[c]) * invstd[c];
            for (Index n = 0; n < s.n; ++n) {
              const Scalar* g = dy.plane(n, c);
              const Scalar* q = xhat.plane(n, c);
              Scalar* d = dx.plane(n, c);
              if (mode == Mode::train) {
                const double inv_count = 1.0 / static_cast<double>(count);
                for (Index i = 0; i < s.plane(); ++i) {
                  d[i] += static_cast<Scalar>(
                      scale * (g[i] - inv_count * dbeta[c] - q[i] * inv_count * dgamma[c]));
                }
              } else {
                for (Index i = 0; i < s.plane(); ++i) d[i] += static_cast<Scalar>(scale * g[i]);
              }
            }
          }
        }
        if (self.inputs[1]->requires_grad) self.inputs[1]->grad_buffer().array() += dgamma.array();
        if (self.inputs[2]->requires_grad) self.inputs[2]->grad_buffer().array() += dbeta.array();
      });
}

// ---- pooling / resampling -------------------------------------------------

template <typename Scalar>
Var<Scalar> max_pool_2x2(const Var<Scalar>& x) {
  const Shape4 s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("max_pool_2x2 needs even spatial dims, got " + s.str());
  }
  const Shape4 os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor4<Scalar> out(os);
  std::vector<Index> argmax(static_cast<std::size_t>(os.size()));
  const auto& xv = x.value();
  Index o = 0;
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      for (Index i = 0; i < os.h; ++i) {
        for (Index j = 0; j < os.w; ++j, ++o) {
          Index best = xv.offset(n, c, 2 * i, 2 * j);
          for (Index di = 0; di < 2; ++di) {
            for (Index dj = 0; dj < 2; ++dj) {
              const Index idx = xv.offset(n, c, 2 * i + di, 2 * j + dj);
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          out[o] = xv[best];
          argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  }
  if (auto* rec = active_kink_recorder()) {
    PatternHash h;
    for (Index a : argmax) h.add_word(static_cast<std::uint64_t>(a));
    rec->record(h.value());
  }
  return make_result<Scalar>(std::move(out), {x}, "max_pool_2x2",
                             [argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& dy = *self.grad;
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[static_cast<Index>(i)];
  });
}

template <typename Scalar>
Var<Scalar> global_pool(const Var<Scalar>& x, Reduce kind) {
  const Shape4 s = x.shape();
  const Shape4 os{s.n, s.c, 1, 1};
  Tensor4<Scalar> out(os);
  std::vector<Index> argmax;
  const auto& xv = x.value();
  if (kind == Reduce::max) argmax.resize(static_cast<std::size_t>(os.size()));
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* p = xv.plane(n, c);
      const Index o = n * s.c + c;
      if (kind == Reduce::avg) {
        double acc = 0;
        for (Index i = 0; i < s.plane(); ++i) acc += p[i];
        out[o] = static_cast<Scalar>(acc / static_cast<double>(s.plane()));
      } else {
        Index best = 0;
        for (Index i = 1; i < s.plane(); ++i)
          if (p[i] > p[best]) best = i;
        out[o] = p[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  if (kind == Reduce::max) {
    if (auto* rec = active_kink_recorder()) {
      PatternHash h;
      for (Index a : argmax) h.add_word(static_cast<std::uint64_t>(a));
      rec->record(h.value());
    }
  }
  return make_result<Scalar>(std::move(out), {x}, "global_pool",
                             [s, kind, argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& dy = *self.grad;
    for (Index n = 0; n < s.n; ++n) {
      for (Index c = 0; c < s.c; ++c) {
        const Index o = n * s.c + c;
        Scalar* d = dx.plane(n, c);
        if (kind == Reduce::avg) {
          const Scalar g = dy[o] / static_cast<Scalar>(s.plane());
          for (Index i = 0; i < s.plane(); ++i) d[i] += g;
        } else {
          d[argmax[static_cast<std::size_t>(o)]] += dy[o];
        }
      }
    }
  });
}

template <typename Scalar>
Tensor4<Scalar> resize_bilinear(const Tensor4<Scalar>& x, Index out_h, Index out_w) {
  const Shape4 s = x.shape();
  Tensor4<Scalar> out(Shape4{s.n, s.c, out_h, out_w});
  const auto ay = bilinear_axis(s.h, out_h);
  const auto ax = bilinear_axis(s.w, out_w);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* p = x.plane(n, c);
      Scalar* q = out.plane(n, c);
      for (Index i = 0; i < out_h; ++i) {
        const auto& [y0, y1, ly] = ay[static_cast<std::size_t>(i)];
        for (Index j = 0; j < out_w; ++j) {
          const auto& [x0, x1, lx] = ax[static_cast<std::size_t>(j)];
          const double top = (1 - lx) * p[y0 * s.w + x0] + lx * p[y0 * s.w + x1];
          const double bot = (1 - lx) * p[y1 * s.w + x0] + lx * p[y1 * s.w + x1];
          q[i * out_w + j] = static_cast<Scalar>((1 - ly) * top + ly * bot);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor4<Scalar> resize_nearest(const Tensor4<Scalar>& x, Index out_h, Index out_w) {
  const Shape4 s = x.shape();
  Tensor4<Scalar> out(Shape4{s.n, s.c, out_h, out_w});
  auto src = [](Index d, Index in, Index out) {
    const double v = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out);
    return std::min(static_cast<Index>(std::floor(v)), in - 1);
  };
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < out_h; ++i)
        for (Index j = 0; j < out_w; ++j)
          out(n, c, i, j) = x(n, c, src(i, s.h, out_h), src(j, s.w, out_w));
  return out;
}

template <typename Scalar>
Var<Scalar> bilinear_resize(const Var<Scalar>& x, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be >= 1");
  const Shape4 s = x.shape();
  return make_result<Scalar>(resize_bilinear(x.value(), out_h, out_w), {x}, "bilinear_resize",
                             [s, out_h, out_w](Node<Scalar>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& dy = *self.grad;
    const auto ay = bilinear_axis(s.h, out_h);
    const auto ax = bilinear_axis(s.w, out_w);
    for (Index n = 0; n < s.n; ++n) {
      for (Index c = 0; c < s.c; ++c) {
        Scalar* d = dx.plane(n, c);
        const Scalar* g = dy.plane(n, c);
        for (Index i = 0; i < out_h; ++i) {
          const auto& [y0, y1, ly] = ay[static_cast<std::size_t>(i)];
          for (Index j = 0; j < out_w; ++j) {
            const auto& [x0, x1, lx] = ax[static_cast<std::size_t>(j)];
            const double v = g[i * out_w + j];
            d[y0 * s.w + x0] += static_cast<Scalar>((1 - ly) * (1 - lx) * v);
            d[y0 * s.w + x1] += static_cast<Scalar>((1 - ly) * lx * v);
            d[y1 * s.w + x0] += static_cast<Scalar>(ly * (1 - lx) * v);
            d[y1 * s.w + x1] += static_cast<Scalar>(ly * lx * v);
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> channel_shuffle(const Var<Scalar>& x, Index groups) {
  const Shape4 s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw ShapeError("channel_shuffle groups " + std::to_string(groups) +
                     " must divide channels " + std::to_string(s.c));
  }
  const Index per = s.c / groups;
  auto target = [per, groups](Index src) { return (src % per) * groups + src / per; };
  Tensor4<Scalar> out(s);
  const auto& xv = x.value();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      std::copy_n(xv.plane(n, c), s.plane(), out.plane(n, target(c)));
  return make_result<Scalar>(std::move(out), {x}, "channel_shuffle", [s, target](Node<Scalar>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& dy = *self.grad;
    for (Index n = 0; n < s.n; ++n) {
      for (Index c = 0; c < s.c; ++c) {
        Scalar* d = dx.plane(n, c);
        const Scalar* g = dy.plane(n, target(c));
        for (Index i = 0; i < s.plane(); ++i) d[i] += g[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> channel_stats(const Var<Scalar>& x, Reduce kind) {
  const Shape4 s = x.shape();
  Tensor4<Scalar> out(Shape4{s.n, 1, s.h, s.w});
  std::vector<Index> argmax;
  if (kind == Reduce::max) argmax.assign(static_cast<std::size_t>(s.n * s.plane()), 0);
  const auto& xv = x.value();
  for (Index n = 0; n < s.n; ++n) {
    Scalar* o = out.plane(n, 0);
    if (kind == Reduce::avg) {
      for (Index i = 0; i < s.plane(); ++i) {
        double acc = 0;
        for (Index c = 0; c < s.c; ++c) acc += xv.plane(n, c)[i];
        o[i] = static_cast<Scalar>(acc / static_cast<double>(s.c));
      }
    } else {
      std::copy_n(xv.plane(n, 0), s.plane(), o);
      Index* am = argmax.data() + n * s.plane();
      for (Index c = 1; c < s.c; ++c) {
        const Scalar* p = xv.plane(n, c);
        for (Index i = 0; i < s.plane(); ++i) {
          if (p[i] > o[i]) {
            o[i] = p[i];
            am[i] = c;
          }
        }
      }
    }
  }
  if (kind == Reduce::max) {
    if (auto* rec = active_kink_recorder()) {
      PatternHash h;
      for (Index a : argmax) h.add_word(static_cast<std::uint64_t>(a));
      rec->record(h.value());
    }
  }
  return make_result<Scalar>(std::move(out), {x}, "channel_stats",
                             [s, kind, argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& dy = *self.grad;
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* g = dy.plane(n, 0);
      if (kind == Reduce::avg) {
        const Scalar inv = Scalar(1) / static_cast<Scalar>(s.c);
        for (Index c = 0; c < s.c; ++c) {
          Scalar* d = dx.plane(n, c);
          for (Index i = 0; i < s.plane(); ++i) d[i] += g[i] * inv;
        }
      } else {
        const Index* am = argmax.data() + n * s.plane();
        for (Index i = 0; i < s.plane(); ++i) dx.plane(n, am[i])[i] += g[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels spatial mismatch: " + sa.str() + " vs " + sb.str());
  }
  Tensor4<Scalar> out(Shape4{sa.n, sa.c + sb.c, sa.h, sa.w});
  for (Index n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().plane(n, 0), sa.c * sa.plane(), out.plane(n, 0));
    std::copy_n(b.value().plane(n, 0), sb.c * sb.plane(), out.plane(n, sa.c));
  }
  return make_result<Scalar>(std::move(out), {a, b}, "concat_channels", [sa, sb](Node<Scalar>& self) {
    const auto& dy = *self.grad;
    for (Index n = 0; n < sa.n; ++n) {
      if (self.inputs[0]->requires_grad) {
        auto& da = self.inputs[0]->grad_buffer();
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(da.plane(n, 0), sa.c * sa.plane()) +=
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(dy.plane(n, 0), sa.c * sa.plane());
      }
      if (self.inputs[1]->requires_grad) {
        auto& db = self.inputs[1]->grad_buffer();
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(db.plane(n, 0), sb.c * sb.plane()) +=
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(dy.plane(n, sa.c), sb.c * sb.plane());
      }
    }
  });
}

#define MKUNET_INSTANTIATE_OPS(S)                                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                           \
  template Var<S> hadamard(const Var<S>&, const Var<S>&);                                      \
  template Var<S> sum(const Var<S>&);                                                          \
  template Var<S> relu(const Var<S>&);                                                         \
  template Var<S> relu6(const Var<S>&);                                                        \
  template Var<S> sigmoid(const Var<S>&);                                                      \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&,           \
                         const ConvSpec&);                                                     \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, RunningStats<S>&,    \
                             Mode);                                                            \
  template Var<S> max_pool_2x2(const Var<S>&);                                                 \
  template Var<S> global_pool(const Var<S>&, Reduce);                                          \
  template Var<S> bilinear_resize(const Var<S>&, Index, Index);                                \
  template Var<S> channel_shuffle(const Var<S>&, Index);                                       \
  template Var<S> channel_stats(const Var<S>&, Reduce);                                        \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                               \
  template Tensor4<S> resize_bilinear(const Tensor4<S>&, Index, Index);                        \
  template Tensor4<S> resize_nearest(const Tensor4<S>&, Index, Index);

MKUNET_INSTANTIATE_OPS(float)
MKUNET_INSTANTIATE_OPS(double)

}  // namespace mkunet
