//
// Copyright 2026 The dplora Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include "dplora/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace dplora::ops {
namespace {

using Buf = Tape::GradBuffer;

void CheckInputs(const char* op, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined()) t->CheckFinite(std::string(op) + " input");
  }
}

// Wraps `data` as the op result and records `backward` when a gradient is
// needed for any input.
Tensor Emit(Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
            Tape::BackwardFn backward) {
  Tensor out = Tensor::FromData(std::move(shape), std::move(data));
  Tape* tape = Tape::Active();
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->Record(std::move(inputs), out, std::move(backward));
  return out;
}

[[noreturn]] void Mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + ShapeToString(a.shape()) + " and " +
                   ShapeToString(b.shape()));
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;  // 0 on broadcast dims
  bool same = false;
};

std::vector<std::int64_t> Strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Broadcast MakeBroadcast(const char* op, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out = a.shape();
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.rank(), b.rank());
  Shape sa(r, 1), sb(r, 1);
  std::copy(a.shape().begin(), a.shape().end(), sa.begin() + (r - a.rank()));
  std::copy(b.shape().begin(), b.shape().end(), sb.begin() + (r - b.rank()));
  bc.out.resize(r);
  auto st_a = Strides(sa), st_b = Strides(sb);
  bc.stride_a.resize(r);
  bc.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (sa[i] != sb[i] && sa[i] != 1 && sb[i] != 1) Mismatch(op, a, b);
    bc.out[i] = std::max(sa[i], sb[i]);
    bc.stride_a[i] = sa[i] == 1 ? 0 : st_a[i];
    bc.stride_b[i] = sb[i] == 1 ? 0 : st_b[i];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void ForEachBroadcast(const Broadcast& bc, Fn&& fn) {
  const std::int64_t n = NumElements(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const int r = static_cast<int>(bc.out.size());
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor Binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  CheckInputs(op, {&a, &b});
  Broadcast bc = MakeBroadcast(op, a, b);
  std::vector<Real> out(static_cast<std::size_t>(NumElements(bc.out)));
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  switch (kind) {
    case BinaryKind::kAdd:
      ForEachBroadcast(bc, [&](auto o, auto i, auto j) { out[o] = pa[i] + pb[j]; });
      break;
    case BinaryKind::kSub:
      ForEachBroadcast(bc, [&](auto o, auto i, auto j) { out[o] = pa[i] - pb[j]; });
      break;
    case BinaryKind::kMul:
      ForEachBroadcast(bc, [&](auto o, auto i, auto j) { out[o] = pa[i] * pb[j]; });
      break;
  }
  Shape shape = bc.out;
  return Emit(std::move(shape), std::move(out), {a, b},
              [a, b, bc, kind](const Buf& g, std::span<Buf* const> gin) {
                const Real* pa = a.data().data();
                const Real* pb = b.data().data();
                if (Buf* ga = gin[0]) {
                  if (kind == BinaryKind::kMul) {
                    ForEachBroadcast(bc, [&](auto o, auto i, auto j) { (*ga)[i] += g[o] * pb[j]; });
                  } else {
                    ForEachBroadcast(bc, [&](auto o, auto i, auto) { (*ga)[i] += g[o]; });
                  }
                }
                if (Buf* gb = gin[1]) {
                  switch (kind) {
                    case BinaryKind::kAdd:
                      ForEachBroadcast(bc, [&](auto o, auto, auto j) { (*gb)[j] += g[o]; });
                      break;
                    case BinaryKind::kSub:
                      ForEachBroadcast(bc, [&](auto o, auto, auto j) { (*gb)[j] -= g[o]; });
                      break;
                    case BinaryKind::kMul:
                      ForEachBroadcast(bc,
                                       [&](auto o, auto i, auto j) { (*gb)[j] += g[o] * pa[i]; });
                      break;
                  }
                }
              });
}

// ---- dense kernels --------------------------------------------------------

// Row-major views; Eigen supplies the blocked, vectorised products.
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMatrix>;
using View = Eigen::Map<RowMatrix>;

// c[M,N] += a[M,K] * b[K,N]
void GemmNN(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
  View(c, m, n).noalias() += ConstView(a, m, k) * ConstView(b, k, n);
}

// c[M,K] += a[M,N] * b[K,N]^T
void GemmNT(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t n,
            std::int64_t k) {
  View(c, m, k).noalias() += ConstView(a, m, n) * ConstView(b, k, n).transpose();
}

// c[K,N] += a[M,K]^T * b[M,N]
void GemmTN(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
  View(c, k, n).noalias() += ConstView(a, m, k).transpose() * ConstView(b, m, n);
}

}  // namespace

Tensor Add(const Tensor& a, const Tensor& b) { return Binary("add", BinaryKind::kAdd, a, b); }
Tensor Sub(const Tensor& a, const Tensor& b) { return Binary("sub", BinaryKind::kSub, a, b); }
Tensor Mul(const Tensor& a, const Tensor& b) { return Binary("mul", BinaryKind::kMul, a, b); }

Tensor Scale(const Tensor& x, Real factor) {
  CheckInputs("scale", {&x});
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Emit(x.shape(), std::move(out), {x}, [factor](const Buf& g, std::span<Buf* const> gin) {
    Buf& gx = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Tensor Square(const Tensor& x) {
  CheckInputs("square", {&x});
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= v;
  return Emit(x.shape(), std::move(out), {x}, [x](const Buf& g, std::span<Buf* const> gin) {
    Buf& gx = *gin[0];
    auto xv = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0f * xv[i] * g[i];
  });
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  CheckInputs("matmul", {&a, &b});
  if (a.rank() < 2 || b.rank() < 2) Mismatch("matmul", a, b);
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) Mismatch("matmul", a, b);
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      Mismatch("matmul", a, b);
    }
  }
  const std::int64_t batch = a.numel() / (m * k);
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  shape.push_back(n);
  std::vector<Real> out(static_cast<std::size_t>(batch * m * n), 0.0f);
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  const std::int64_t b_step = shared_b ? 0 : k * n;
  for (std::int64_t s = 0; s < batch; ++s) {
    GemmNN(pa + s * m * k, pb + s * b_step, out.data() + s * m * n, m, k, n);
  }
  return Emit(std::move(shape), std::move(out), {a, b},
              [a, b, batch, m, k, n, b_step](const Buf& g, std::span<Buf* const> gin) {
                const Real* pa = a.data().data();
                const Real* pb = b.data().data();
                for (std::int64_t s = 0; s < batch; ++s) {
                  const Real* gs = g.data() + s * m * n;
                  if (gin[0]) GemmNT(gs, pb + s * b_step, gin[0]->data() + s * m * k, m, n, k);
                  if (gin[1]) GemmTN(pa + s * m * k, gs, gin[1]->data() + s * b_step, m, k, n);
                }
              });
}

Tensor Permute(const Tensor& x, std::span<const int> order) {
  CheckInputs("permute", {&x});
  const int r = static_cast<int>(x.rank());
  if (static_cast<int>(order.size()) != r) {
    throw ShapeError("permute: order length does not match rank of " + ShapeToString(x.shape()));
  }
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    if (order[i] < 0 || order[i] >= r || seen[order[i]]) {
      throw ShapeError("permute: invalid axis order");
    }
    seen[order[i]] = true;
    out_shape[i] = x.shape()[order[i]];
  }
  // Source stride for each output axis.
  auto in_strides = Strides(x.shape());
  std::vector<std::int64_t> src(r);
  for (int i = 0; i < r; ++i) src[i] = in_strides[order[i]];
  // gather[o] = source flat index of output element o
  const std::int64_t n = x.numel();
  std::vector<std::int64_t> gather(static_cast<std::size_t>(n));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t o = 0; o < n; ++o) {
      gather[o] = off;
      for (int d = r - 1; d >= 0; --d) {
        ++idx[d];
        off += src[d];
        if (idx[d] < out_shape[d]) break;
        off -= src[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<Real> out(static_cast<std::size_t>(n));
  auto xv = x.data();
  for (std::int64_t o = 0; o < n; ++o) out[o] = xv[gather[o]];
  return Emit(std::move(out_shape), std::move(out), {x},
              [gather = std::move(gather)](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                for (std::size_t o = 0; o < g.size(); ++o) gx[gather[o]] += g[o];
              });
}

Tensor Transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + ShapeToString(x.shape()));
  std::vector<int> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return Permute(x, order);
}

namespace {

struct ConvGeom {
  std::int64_t n, c, h, w, o, kh, kw, oh, ow;
  int stride, pad;
};

// cols: [C*KH*KW, OH*OW] for one image.
void Im2Col(const Real* img, const ConvGeom& g, Real* cols) {
  const std::int64_t plane = g.oh * g.ow;
  for (std::int64_t ci = 0; ci < g.c; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        Real* row = cols + ((ci * g.kh + ky) * g.kw + kx) * plane;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            row[oy * g.ow + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                      ? img[(ci * g.h + iy) * g.w + ix]
                                      : 0.0f;
          }
        }
      }
    }
  }
}

void Col2ImAdd(const Real* cols, const ConvGeom& g, Real* img) {
  const std::int64_t plane = g.oh * g.ow;
  for (std::int64_t ci = 0; ci < g.c; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const Real* row = cols + ((ci * g.kh + ky) * g.kw + kx) * plane;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) img[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  CheckInputs("conv2d", {&x, &weight, &bias});
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    Mismatch("conv2d", x, weight);
  }
  if (opts.stride < 1 || opts.padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
             0, 0, opts.stride, opts.padding};
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (g.oh <= 0 || g.ow <= 0) Mismatch("conv2d", x, weight);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) Mismatch("conv2d", weight, bias);

  const std::int64_t ckk = g.c * g.kh * g.kw;
  const std::int64_t plane = g.oh * g.ow;
  std::vector<Real> out(static_cast<std::size_t>(g.n * g.o * plane), 0.0f);
  std::vector<Real> cols(static_cast<std::size_t>(ckk * plane));
  const Real* px = x.data().data();
  const Real* pw = weight.data().data();
  for (std::int64_t s = 0; s < g.n; ++s) {
    Im2Col(px + s * g.c * g.h * g.w, g, cols.data());
    Real* os = out.data() + s * g.o * plane;
    if (bias.defined()) {
      for (std::int64_t oc = 0; oc < g.o; ++oc) std::fill_n(os + oc * plane, plane, bias.at(oc));
    }
    GemmNN(pw, cols.data(), os, g.o, ckk, plane);
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Emit({g.n, g.o, g.oh, g.ow}, std::move(out), std::move(inputs),
              [x, weight, g, ckk, plane](const Buf& grad, std::span<Buf* const> gin) {
                const Real* px = x.data().data();
                const Real* pw = weight.data().data();
                std::vector<Real> cols(static_cast<std::size_t>(ckk * plane));
                std::vector<Real> dcols;
                if (gin[0]) dcols.resize(cols.size());
                for (std::int64_t s = 0; s < g.n; ++s) {
                  const Real* gs = grad.data() + s * g.o * plane;
                  if (gin[1]) {
                    Im2Col(px + s * g.c * g.h * g.w, g, cols.data());
                    GemmNT(gs, cols.data(), gin[1]->data(), g.o, plane, ckk);
                  }
                  if (gin[0]) {
                    std::fill(dcols.begin(), dcols.end(), 0.0f);
                    GemmTN(pw, gs, dcols.data(), g.o, ckk, plane);
                    Col2ImAdd(dcols.data(), g, gin[0]->data() + s * g.c * g.h * g.w);
                  }
                  if (gin.size() > 2 && gin[2]) {
                    for (std::int64_t oc = 0; oc < g.o; ++oc) {
                      Real acc = 0.0f;
                      for (std::int64_t p = 0; p < plane; ++p) acc += gs[oc * plane + p];
                      (*gin[2])[oc] += acc;
                    }
                  }
                }
              });
}

Tensor UpsampleNearest(const Tensor& x, int factor) {
  CheckInputs("upsample", {&x});
  if (x.rank() < 2 || factor < 1) throw ShapeError("upsample: invalid input or factor");
  const std::int64_t h = x.dim(-2), w = x.dim(-1);
  const std::int64_t planes = x.numel() / (h * w);
  const std::int64_t oh = h * factor, ow = w * factor;
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  std::vector<Real> out(static_cast<std::size_t>(planes * oh * ow));
  auto xv = x.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
      }
    }
  }
  return Emit(std::move(shape), std::move(out), {x},
              [planes, h, w, oh, ow, factor](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                for (std::int64_t p = 0; p < planes; ++p) {
                  for (std::int64_t y = 0; y < oh; ++y) {
                    for (std::int64_t xx = 0; xx < ow; ++xx) {
                      gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                    }
                  }
                }
              });
}

namespace {

// Normalizes `rows` contiguous segments of length `len`. The affine channel
// for element j of segment r is channel_of(r, j).
template <typename ChannelOf>
Tensor NormalizeSegments(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::int64_t rows, std::int64_t len, Real eps, ChannelOf channel_of) {
  std::vector<Real> out(static_cast<std::size_t>(x.numel()));
  std::vector<Real> xhat(out.size());
  std::vector<Real> rstd(static_cast<std::size_t>(rows));
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* seg = xv.data() + r * len;
    double mean = 0.0;
    for (std::int64_t j = 0; j < len; ++j) mean += seg[j];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::int64_t j = 0; j < len; ++j) var += (seg[j] - mean) * (seg[j] - mean);
    var /= static_cast<double>(len);
    const Real rs = static_cast<Real>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (std::int64_t j = 0; j < len; ++j) {
      const std::int64_t i = r * len + j;
      const std::int64_t c = channel_of(r, j);
      xhat[i] = static_cast<Real>(seg[j] - mean) * rs;
      out[i] = xhat[i] * gv[c] + bv[c];
    }
  }
  return Emit(x.shape(), std::move(out), {x, gamma, beta},
              [gamma, rows, len, channel_of, xhat = std::move(xhat), rstd = std::move(rstd)](
                  const Buf& g, std::span<Buf* const> gin) {
                auto gv = gamma.data();
                for (std::int64_t r = 0; r < rows; ++r) {
                  double sum_d = 0.0, sum_dx = 0.0;
                  for (std::int64_t j = 0; j < len; ++j) {
                    const std::int64_t i = r * len + j;
                    const double d = static_cast<double>(g[i]) * gv[channel_of(r, j)];
                    sum_d += d;
                    sum_dx += d * xhat[i];
                    if (gin[1]) (*gin[1])[channel_of(r, j)] += g[i] * xhat[i];
                    if (gin[2]) (*gin[2])[channel_of(r, j)] += g[i];
                  }
                  if (!gin[0]) continue;
                  const double mean_d = sum_d / static_cast<double>(len);
                  const double mean_dx = sum_dx / static_cast<double>(len);
                  for (std::int64_t j = 0; j < len; ++j) {
                    const std::int64_t i = r * len + j;
                    const double d = static_cast<double>(g[i]) * gv[channel_of(r, j)];
                    (*gin[0])[i] += static_cast<Real>(rstd[r] * (d - mean_d - xhat[i] * mean_dx));
                  }
                }
              });
}

}  // namespace

Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  CheckInputs("layer_norm", {&x, &gamma, &beta});
  if (x.rank() < 1) throw ShapeError("layer_norm on scalar");
  const std::int64_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) Mismatch("layer_norm", x, gamma);
  return NormalizeSegments(x, gamma, beta, x.numel() / d, d, eps,
                           [](std::int64_t, std::int64_t j) { return j; });
}

Tensor GroupNorm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, Real eps) {
  CheckInputs("group_norm", {&x, &gamma, &beta});
  if (x.rank() < 2 || groups < 1 || x.dim(1) % groups != 0) {
    throw ShapeError("group_norm: channels of " + ShapeToString(x.shape()) +
                     " not divisible into " + std::to_string(groups) + " groups");
  }
  const std::int64_t c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) Mismatch("group_norm", x, gamma);
  const std::int64_t spatial = x.numel() / (x.dim(0) * c);
  const std::int64_t per_group = c / groups;
  const std::int64_t len = per_group * spatial;
  return NormalizeSegments(x, gamma, beta, x.dim(0) * groups, len, eps,
                           [groups, per_group, spatial](std::int64_t r, std::int64_t j) {
                             return (r % groups) * per_group + j / spatial;
                           });
}

Tensor Silu(const Tensor& x) {
  CheckInputs("silu", {&x});
  std::vector<Real> out(static_cast<std::size_t>(x.numel()));
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / (1.0f + std::exp(-xv[i]));
  return Emit(x.shape(), std::move(out), {x}, [x](const Buf& g, std::span<Buf* const> gin) {
    auto xv = x.data();
    Buf& gx = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real s = 1.0f / (1.0f + std::exp(-xv[i]));
      gx[i] += g[i] * s * (1.0f + xv[i] * (1.0f - s));
    }
  });
}

Tensor Softmax(const Tensor& x) {
  CheckInputs("softmax", {&x});
  if (x.rank() < 1) throw ShapeError("softmax on scalar");
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  std::vector<Real> out(static_cast<std::size_t>(x.numel()));
  auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * d;
    Real* o = out.data() + r * d;
    const Real mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::int64_t j = 0; j < d; ++j) o[j] = static_cast<Real>(o[j] / z);
  }
  std::vector<Real> probs = out;
  return Emit(x.shape(), std::move(out), {x},
              [rows, d, probs = std::move(probs)](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                for (std::int64_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::int64_t j = 0; j < d; ++j) dot += g[r * d + j] * probs[r * d + j];
                  for (std::int64_t j = 0; j < d; ++j) {
                    gx[r * d + j] += probs[r * d + j] * static_cast<Real>(g[r * d + j] - dot);
                  }
                }
              });
}

Tensor LogSoftmax(const Tensor& x) {
  CheckInputs("log_softmax", {&x});
  if (x.rank() < 1) throw ShapeError("log_softmax on scalar");
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  std::vector<Real> out(static_cast<std::size_t>(x.numel()));
  std::vector<Real> probs(out.size());
  auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * d;
    const Real mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) z += std::exp(static_cast<double>(in[j] - mx));
    const double lz = std::log(z) + mx;
    for (std::int64_t j = 0; j < d; ++j) {
      out[r * d + j] = static_cast<Real>(in[j] - lz);
      probs[r * d + j] = static_cast<Real>(std::exp(in[j] - lz));
    }
  }
  return Emit(x.shape(), std::move(out), {x},
              [rows, d, probs = std::move(probs)](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                for (std::int64_t r = 0; r < rows; ++r) {
                  double s = 0.0;
                  for (std::int64_t j = 0; j < d; ++j) s += g[r * d + j];
                  for (std::int64_t j = 0; j < d; ++j) {
                    gx[r * d + j] += g[r * d + j] - static_cast<Real>(probs[r * d + j] * s);
                  }
                }
              });
}

Tensor Sum(const Tensor& x) {
  CheckInputs("sum", {&x});
  double acc = 0.0;
  for (Real v : x.data()) acc += v;
  return Emit({}, {static_cast<Real>(acc)}, {x}, [](const Buf& g, std::span<Buf* const> gin) {
    for (auto& v : *gin[0]) v += g[0];
  });
}

Tensor Mean(const Tensor& x) {
  CheckInputs("mean", {&x});
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  double acc = 0.0;
  for (Real v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return Emit({}, {static_cast<Real>(acc / n)}, {x}, [n](const Buf& g, std::span<Buf* const> gin) {
    const Real share = static_cast<Real>(g[0] / n);
    for (auto& v : *gin[0]) v += share;
  });
}

Tensor MeanTrailing(const Tensor& x, int from_axis) {
  CheckInputs("mean_trailing", {&x});
  if (from_axis < 0 || from_axis > static_cast<int>(x.rank())) {
    throw ShapeError("mean_trailing: bad axis for " + ShapeToString(x.shape()));
  }
  Shape shape(x.shape().begin(), x.shape().begin() + from_axis);
  const std::int64_t outer = NumElements(shape);
  const std::int64_t inner = outer == 0 ? 0 : x.numel() / outer;
  if (inner == 0) throw ShapeError("mean_trailing over empty dims");
  std::vector<Real> out(static_cast<std::size_t>(outer));
  auto xv = x.data();
  for (std::int64_t r = 0; r < outer; ++r) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < inner; ++j) acc += xv[r * inner + j];
    out[r] = static_cast<Real>(acc / static_cast<double>(inner));
  }
  return Emit(std::move(shape), std::move(out), {x},
              [outer, inner](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                const Real inv = 1.0f / static_cast<Real>(inner);
                for (std::int64_t r = 0; r < outer; ++r) {
                  const Real share = g[r] * inv;
                  for (std::int64_t j = 0; j < inner; ++j) gx[r * inner + j] += share;
                }
              });
}

Tensor Reshape(const Tensor& x, Shape shape) {
  CheckInputs("reshape", {&x});
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("reshape: cannot infer dim for " + ShapeToString(x.shape()));
    }
    shape[infer] = x.numel() / known;
  }
  if (NumElements(shape) != x.numel()) {
    throw ShapeError("reshape: " + ShapeToString(x.shape()) + " -> " + ShapeToString(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return Emit(std::move(shape), std::move(out), {x}, [](const Buf& g, std::span<Buf* const> gin) {
    Buf& gx = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor Concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = parts.front();
  const int r = static_cast<int>(first.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("concat: axis out of range");
  Shape shape = first.shape();
  shape[ax] = 0;
  for (const Tensor& p : parts) {
    CheckInputs("concat", {&p});
    if (static_cast<int>(p.rank()) != r) Mismatch("concat", first, p);
    for (int d = 0; d < r; ++d) {
      if (d != ax && p.shape()[d] != first.shape()[d]) Mismatch("concat", first, p);
    }
    shape[ax] += p.shape()[ax];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= shape[d];
  for (int d = ax + 1; d < r; ++d) inner *= shape[d];
  const std::int64_t out_row = shape[ax] * inner;
  std::vector<Real> out(static_cast<std::size_t>(NumElements(shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::int64_t row = p.shape()[ax] * inner;
    auto pv = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * row, row, out.data() + o * out_row + off);
    }
    off += row;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<std::int64_t> rows;
  for (const Tensor& p : parts) rows.push_back(p.shape()[ax] * inner);
  return Emit(std::move(shape), std::move(out), std::move(inputs),
              [outer, out_row, offsets, rows](const Buf& g, std::span<Buf* const> gin) {
                for (std::size_t k = 0; k < gin.size(); ++k) {
                  if (!gin[k]) continue;
                  for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t j = 0; j < rows[k]; ++j) {
                      (*gin[k])[o * rows[k] + j] += g[o * out_row + offsets[k] + j];
                    }
                  }
                }
              });
}

Tensor Slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  CheckInputs("slice", {&x});
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("slice: axis out of range");
  const std::int64_t extent = x.shape()[ax];
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") outside dim of size " + std::to_string(extent));
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (int d = ax + 1; d < r; ++d) inner *= x.shape()[d];
  Shape shape = x.shape();
  shape[ax] = length;
  const std::int64_t in_row = extent * inner, out_row = length * inner, skip = start * inner;
  std::vector<Real> out(static_cast<std::size_t>(outer * out_row));
  auto xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + o * in_row + skip, out_row, out.data() + o * out_row);
  }
  return Emit(std::move(shape), std::move(out), {x},
              [outer, in_row, out_row, skip](const Buf& g, std::span<Buf* const> gin) {
                Buf& gx = *gin[0];
                for (std::int64_t o = 0; o < outer; ++o) {
                  for (std::int64_t j = 0; j < out_row; ++j) {
                    gx[o * in_row + skip + j] += g[o * out_row + j];
                  }
                }
              });
}

Tensor EmbeddingLookup(const Tensor& table, std::span<const int> indices) {
  CheckInputs("embedding_lookup", {&table});
  if (table.rank() != 2) throw ShapeError("embedding table must be 2-D");
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<Real> out(idx.size() * static_cast<std::size_t>(d));
  auto tv = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vocab) {
      throw ShapeError("embedding index " + std::to_string(idx[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + idx[i] * d, d, out.data() + i * d);
  }
  return Emit({static_cast<std::int64_t>(idx.size()), d}, std::move(out), {table},
              [idx, d](const Buf& g, std::span<Buf* const> gin) {
                Buf& gt = *gin[0];
                for (std::size_t i = 0; i < idx.size(); ++i) {
                  for (std::int64_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
                }
              });
}

Tensor CrossEntropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw ShapeError("cross_entropy: logits " + ShapeToString(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::int64_t k = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || y >= k) throw ShapeError("cross_entropy: label out of range");
  }
  Tensor logp = LogSoftmax(logits);
  std::vector<Real> out(labels.size());
  auto lv = logp.data();
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = -lv[i * k + labels[i]];
  std::vector<int> ys(labels.begin(), labels.end());
  return Emit({static_cast<std::int64_t>(ys.size())}, std::move(out), {logp},
              [ys, k](const Buf& g, std::span<Buf* const> gin) {
                Buf& gl = *gin[0];
                for (std::size_t i = 0; i < ys.size(); ++i) gl[i * k + ys[i]] -= g[i];
              });
}

}  // namespace dplora::ops
