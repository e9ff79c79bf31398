// Copyright 2026 The gradflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gradflow/graph.hpp"

#include <algorithm>
#include <cmath>

namespace gradflow::ad {

namespace {

// ---------------------------------------------------------------------------
// Dense kernels. All of them accumulate into `out` so the same code serves
// forward evaluation (freshly zeroed output) and adjoint accumulation.
// ---------------------------------------------------------------------------

void axpy(std::span<const double> x, double a, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// x:(Ci,H,W) * k:(Co,Ci,kh,kw) -> out:(Co,H,W), zero-padded "same".
void conv2d_acc(const Tensor& x, const Tensor& k, Tensor& out) {
  const std::size_t ci_n = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t co_n = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t co = 0; co < co_n; ++co) {
    double* outp = out.data() + co * h * w;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* xp = x.data() + ci * h * w;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - ph;
        const std::ptrdiff_t i_lo = std::max<std::ptrdiff_t>(0, -oy);
        const std::ptrdiff_t i_hi = std::min<std::ptrdiff_t>(hh, hh - oy);
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const double wgt = k.data()[((co * ci_n + ci) * kh + dy) * kw + dx];
          const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pw;
          const std::ptrdiff_t j_lo = std::max<std::ptrdiff_t>(0, -ox);
          const std::ptrdiff_t j_hi = std::min<std::ptrdiff_t>(ww, ww - ox);
          if (j_lo >= j_hi) continue;
          for (std::ptrdiff_t i = i_lo; i < i_hi; ++i) {
            const double* src = xp + (i + oy) * ww + j_lo + ox;
            double* dst = outp + i * ww + j_lo;
            const std::ptrdiff_t n = j_hi - j_lo;
            for (std::ptrdiff_t j = 0; j < n; ++j) dst[j] += wgt * src[j];
          }
        }
      }
    }
  }
}

// Adjoint of conv2d w.r.t. x: y:(Co,H,W) * k -> out:(Ci,H,W).
void conv2d_input_adj_acc(const Tensor& y, const Tensor& k, Tensor& out) {
  const std::size_t co_n = y.shape()[0], h = y.shape()[1], w = y.shape()[2];
  const std::size_t ci_n = k.shape()[1], kh = k.shape()[2], kw = k.shape()[3];
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    double* outp = out.data() + ci * h * w;
    for (std::size_t co = 0; co < co_n; ++co) {
      const double* yp = y.data() + co * h * w;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        // gx[ci,a,b] += k[co,ci,dy,dx] * y[co, a-dy+ph, b-dx+pw]
        const std::ptrdiff_t oy = ph - static_cast<std::ptrdiff_t>(dy);
        const std::ptrdiff_t a_lo = std::max<std::ptrdiff_t>(0, -oy);
        const std::ptrdiff_t a_hi = std::min<std::ptrdiff_t>(hh, hh - oy);
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const double wgt = k.data()[((co * ci_n + ci) * kh + dy) * kw + dx];
          const std::ptrdiff_t ox = pw - static_cast<std::ptrdiff_t>(dx);
          const std::ptrdiff_t b_lo = std::max<std::ptrdiff_t>(0, -ox);
          const std::ptrdiff_t b_hi = std::min<std::ptrdiff_t>(ww, ww - ox);
          if (b_lo >= b_hi) continue;
          for (std::ptrdiff_t a = a_lo; a < a_hi; ++a) {
            const double* src = yp + (a + oy) * ww + b_lo + ox;
            double* dst = outp + a * ww + b_lo;
            const std::ptrdiff_t n = b_hi - b_lo;
            for (std::ptrdiff_t j = 0; j < n; ++j) dst[j] += wgt * src[j];
          }
        }
      }
    }
  }
}

// Adjoint of conv2d w.r.t. k: x:(Ci,H,W), y:(Co,H,W) -> out:(Co,Ci,kh,kw).
void conv2d_kernel_adj_acc(const Tensor& x, const Tensor& y, Tensor& out) {
  const std::size_t ci_n = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t co_n = out.shape()[0], kh = out.shape()[2],
                    kw = out.shape()[3];
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* yp = y.data() + co * h * w;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* xp = x.data() + ci * h * w;
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - ph;
        const std::ptrdiff_t i_lo = std::max<std::ptrdiff_t>(0, -oy);
        const std::ptrdiff_t i_hi = std::min<std::ptrdiff_t>(hh, hh - oy);
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pw;
          const std::ptrdiff_t j_lo = std::max<std::ptrdiff_t>(0, -ox);
          const std::ptrdiff_t j_hi = std::min<std::ptrdiff_t>(ww, ww - ox);
          double acc = 0.0;
          if (j_lo < j_hi) {
            for (std::ptrdiff_t i = i_lo; i < i_hi; ++i) {
              const double* ys = yp + i * ww + j_lo;
              const double* xs = xp + (i + oy) * ww + j_lo + ox;
              const std::ptrdiff_t n = j_hi - j_lo;
              for (std::ptrdiff_t j = 0; j < n; ++j) acc += ys[j] * xs[j];
            }
          }
          out.data()[((co * ci_n + ci) * kh + dy) * kw + dx] += acc;
        }
      }
    }
  }
}

// (C,H,W) -> (C,H/2,W/2), mean of each 2x2 window.
void avg_pool2_acc(const Tensor& x, Tensor& out) {
  const std::size_t c_n = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t c = 0; c < c_n; ++c) {
    const double* xp = x.data() + c * h * w;
    double* op = out.data() + c * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const double* r0 = xp + (2 * i) * w;
      const double* r1 = xp + (2 * i + 1) * w;
      for (std::size_t j = 0; j < ow; ++j) {
        op[i * ow + j] +=
            0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
      }
    }
  }
}

// Adjoint of avg_pool2: (C,h,w) -> (C,2h,2w), each source value / 4.
void avg_pool2_adj_acc(const Tensor& y, Tensor& out) {
  const std::size_t c_n = y.shape()[0], h = y.shape()[1], w = y.shape()[2];
  for (std::size_t c = 0; c < c_n; ++c) {
    const double* yp = y.data() + c * h * w;
    double* op = out.data() + c * (2 * h) * (2 * w);
    for (std::size_t i = 0; i < h; ++i) {
      double* r0 = op + (2 * i) * (2 * w);
      double* r1 = op + (2 * i + 1) * (2 * w);
      for (std::size_t j = 0; j < w; ++j) {
        const double v = 0.25 * yp[i * w + j];
        r0[2 * j] += v;
        r0[2 * j + 1] += v;
        r1[2 * j] += v;
        r1[2 * j + 1] += v;
      }
    }
  }
}

// (n,k) x (k,m) -> (n,m)
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  for (std::size_t i = 0; i < n; ++i) {
    double* op = out.data() + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a.data()[i * k + l];
      const double* bp = b.data() + l * m;
      for (std::size_t j = 0; j < m; ++j) op[j] += ail * bp[j];
    }
  }
}

// A:(n,m) x B^T, B:(k,m) -> (n,k)
void matmul_a_bt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.shape()[0], m = a.shape()[1], k = b.shape()[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double* ap = a.data() + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double* bp = b.data() + l * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += ap[j] * bp[j];
      out.data()[i * k + l] += acc;
    }
  }
}

// A^T x B, A:(n,k), B:(n,m) -> (k,m)
void matmul_at_b_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  for (std::size_t i = 0; i < n; ++i) {
    const double* bp = b.data() + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a.data()[i * k + l];
      double* op = out.data() + l * m;
      for (std::size_t j = 0; j < m; ++j) op[j] += ail * bp[j];
    }
  }
}

void transpose_acc(const Tensor& a, Tensor& out) {
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out.data()[j * n + i] += a.data()[i * m + j];
}

}  // namespace

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const { return nodes_[v.id]; }

void Tape::check(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error("invalid tape variable");
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

Var Tape::leaf(Tensor value) {
  return push({OpKind::kLeaf, -1, -1, -1, 0.0, 0, 0, std::move(value)});
}

Var Tape::constant(Tensor value) {
  return push({OpKind::kConstant, -1, -1, -1, 0.0, 0, 0, std::move(value)});
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  if (!value(a).same_shape(value(b))) throw ShapeError("add: shape mismatch");
  Tensor out = value(a);
  const Tensor& vb = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return push({OpKind::kAdd, a.id, b.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  if (!value(a).same_shape(value(b))) throw ShapeError("sub: shape mismatch");
  Tensor out = value(a);
  const Tensor& vb = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  return push({OpKind::kSub, a.id, b.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::mul(Var a, Var b) {
  check(a);
  check(b);
  if (!value(a).same_shape(value(b))) throw ShapeError("mul: shape mismatch");
  Tensor out = value(a);
  const Tensor& vb = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return push({OpKind::kMul, a.id, b.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::scale(Var a, double c) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return push({OpKind::kScale, a.id, -1, -1, c, 0, 0, std::move(out)});
}

Var Tape::shift(Var a, double c) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  return push({OpKind::kShift, a.id, -1, -1, c, 0, 0, std::move(out)});
}

Var Tape::exp(Var a) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return push({OpKind::kExp, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::log(Var a) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return push({OpKind::kLog, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::sqrt(Var a) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  return push({OpKind::kSqrt, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::recip(Var a) {
  check(a);
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / out[i];
  return push({OpKind::kRecip, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::sum(Var a) {
  check(a);
  double acc = 0.0;
  for (double v : value(a).values()) acc += v;
  return push({OpKind::kSum, a.id, -1, -1, 0.0, 0, 0, Tensor::scalar(acc)});
}

Var Tape::dot(Var a, Var b) {
  check(a);
  check(b);
  if (!value(a).same_shape(value(b))) throw ShapeError("dot: shape mismatch");
  const double acc = gradflow::dot(value(a).values(), value(b).values());
  return push({OpKind::kDot, a.id, b.id, -1, 0.0, 0, 0, Tensor::scalar(acc)});
}

Var Tape::scale_by(Var a, Var scalar) {
  check(a);
  check(scalar);
  if (value(scalar).size() != 1) throw ShapeError("scale_by: scalar expected");
  const double s = value(scalar)[0];
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return push(
      {OpKind::kScaleBy, a.id, scalar.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::broadcast_scalar(Var scalar, std::vector<std::size_t> shape) {
  check(scalar);
  if (value(scalar).size() != 1) {
    throw ShapeError("broadcast_scalar: scalar expected");
  }
  Tensor out = Tensor::full(std::move(shape), value(scalar)[0]);
  return push({OpKind::kBroadcastScalar, scalar.id, -1, -1, 0.0, 0, 0,
               std::move(out)});
}

Var Tape::matmul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + va.shape_str() + " x " +
                     vb.shape_str());
  }
  Tensor out({va.shape()[0], vb.shape()[1]});
  matmul_acc(va, vb, out);
  return push({OpKind::kMatMul, a.id, b.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::transpose(Var a) {
  check(a);
  const Tensor& va = value(a);
  if (va.rank() != 2) throw ShapeError("transpose: rank-2 tensor expected");
  Tensor out({va.shape()[1], va.shape()[0]});
  transpose_acc(va, out);
  return push({OpKind::kTranspose, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
  check(a);
  Tensor out = value(a).reshaped(std::move(shape));
  return push({OpKind::kReshape, a.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

namespace {
void check_conv_shapes(const Tensor& x, const Tensor& k) {
  if (x.rank() != 3 || k.rank() != 4) {
    throw ShapeError("conv2d: need (Ci,H,W) input and (Co,Ci,kh,kw) kernel");
  }
  if (k.shape()[1] != x.shape()[0]) {
    throw ShapeError("conv2d: channel mismatch");
  }
  if (k.shape()[2] % 2 == 0 || k.shape()[3] % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd");
  }
}
}  // namespace

Var Tape::conv2d(Var x, Var kernel) {
  check(x);
  check(kernel);
  const Tensor& vx = value(x);
  const Tensor& vk = value(kernel);
  check_conv_shapes(vx, vk);
  Tensor out({vk.shape()[0], vx.shape()[1], vx.shape()[2]});
  conv2d_acc(vx, vk, out);
  return push(
      {OpKind::kConv2d, x.id, kernel.id, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::conv2d_input_adj(Var y, Var kernel) {
  check(y);
  check(kernel);
  const Tensor& vy = value(y);
  const Tensor& vk = value(kernel);
  if (vy.rank() != 3 || vk.rank() != 4 || vk.shape()[0] != vy.shape()[0]) {
    throw ShapeError("conv2d_input_adj: incompatible shapes");
  }
  Tensor out({vk.shape()[1], vy.shape()[1], vy.shape()[2]});
  conv2d_input_adj_acc(vy, vk, out);
  return push({OpKind::kConv2dInputAdj, y.id, kernel.id, -1, 0.0, 0, 0,
               std::move(out)});
}

Var Tape::conv2d_kernel_adj(Var x, Var y, std::size_t kh, std::size_t kw) {
  check(x);
  check(y);
  const Tensor& vx = value(x);
  const Tensor& vy = value(y);
  if (vx.rank() != 3 || vy.rank() != 3 || vx.shape()[1] != vy.shape()[1] ||
      vx.shape()[2] != vy.shape()[2]) {
    throw ShapeError("conv2d_kernel_adj: incompatible shapes");
  }
  Tensor out({vy.shape()[0], vx.shape()[0], kh, kw});
  conv2d_kernel_adj_acc(vx, vy, out);
  return push({OpKind::kConv2dKernelAdj, x.id, y.id, -1, 0.0,
               static_cast<std::int32_t>(kh), static_cast<std::int32_t>(kw),
               std::move(out)});
}

Var Tape::avg_pool2(Var x) {
  check(x);
  const Tensor& vx = value(x);
  if (vx.rank() != 3 || vx.shape()[1] % 2 != 0 || vx.shape()[2] % 2 != 0) {
    throw ShapeError("avg_pool2: (C,H,W) with even H,W expected, got " +
                     vx.shape_str());
  }
  Tensor out({vx.shape()[0], vx.shape()[1] / 2, vx.shape()[2] / 2});
  avg_pool2_acc(vx, out);
  return push({OpKind::kAvgPool2, x.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::avg_pool2_adj(Var y) {
  check(y);
  const Tensor& vy = value(y);
  if (vy.rank() != 3) throw ShapeError("avg_pool2_adj: rank-3 expected");
  Tensor out({vy.shape()[0], vy.shape()[1] * 2, vy.shape()[2] * 2});
  avg_pool2_adj_acc(vy, out);
  return push({OpKind::kAvgPool2Adj, y.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::select_positive(Var cond, Var a, Var b) {
  check(cond);
  check(a);
  check(b);
  const Tensor& vc = value(cond);
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!vc.same_shape(va) || !vc.same_shape(vb)) {
    throw ShapeError("select_positive: shape mismatch");
  }
  Tensor out = va;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(vc[i] > 0.0)) out[i] = vb[i];
  }
  return push({OpKind::kSelectPositive, cond.id, a.id, b.id, 0.0, 0, 0,
               std::move(out)});
}

Var Tape::channel_sum(Var x) {
  check(x);
  const Tensor& vx = value(x);
  if (vx.rank() != 3) throw ShapeError("channel_sum: rank-3 expected");
  const std::size_t c_n = vx.shape()[0], hw = vx.shape()[1] * vx.shape()[2];
  Tensor out({c_n});
  for (std::size_t c = 0; c < c_n; ++c) {
    double acc = 0.0;
    const double* p = vx.data() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    out[c] = acc;
  }
  return push({OpKind::kChannelSum, x.id, -1, -1, 0.0, 0, 0, std::move(out)});
}

Var Tape::channel_broadcast(Var b, std::size_t h, std::size_t w) {
  check(b);
  const Tensor& vb = value(b);
  if (vb.rank() != 1) throw ShapeError("channel_broadcast: rank-1 expected");
  Tensor out({vb.shape()[0], h, w});
  for (std::size_t c = 0; c < vb.size(); ++c) {
    double* p = out.data() + c * h * w;
    for (std::size_t i = 0; i < h * w; ++i) p[i] = vb[c];
  }
  return push({OpKind::kChannelBroadcast, b.id, -1, -1, 0.0,
               static_cast<std::int32_t>(h), static_cast<std::int32_t>(w),
               std::move(out)});
}

// ---------------------------------------------------------------------------
// Dependency analysis
// ---------------------------------------------------------------------------

namespace {
// Differentiable inputs of a node; the condition input of select carries no
// gradient.
int diff_inputs(OpKind kind, std::int32_t a0, std::int32_t a1, std::int32_t a2,
                std::int32_t out[3]) {
  switch (kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return 0;
    case OpKind::kSelectPositive: {
      out[0] = a1;
      out[1] = a2;
      return 2;
    }
    default: {
      int n = 0;
      if (a0 >= 0) out[n++] = a0;
      if (a1 >= 0) out[n++] = a1;
      if (a2 >= 0) out[n++] = a2;
      return n;
    }
  }
}
}  // namespace

std::vector<char> Tape::dependency_mask(std::span<const Var> targets,
                                        std::int32_t up_to) const {
  std::vector<char> useful(static_cast<std::size_t>(up_to) + 1, 0);
  for (Var t : targets) {
    if (t.id <= up_to) useful[t.id] = 1;
  }
  for (std::int32_t i = 0; i <= up_to; ++i) {
    if (useful[i]) continue;
    const Node& n = nodes_[i];
    std::int32_t in[3];
    const int cnt = diff_inputs(n.kind, n.a0, n.a1, n.a2, in);
    for (int j = 0; j < cnt; ++j) {
      if (useful[in[j]]) {
        useful[i] = 1;
        break;
      }
    }
  }
  return useful;
}

// ---------------------------------------------------------------------------
// Value-mode backward sweep
// ---------------------------------------------------------------------------

std::vector<Tensor> Tape::gradients(Var root, std::span<const Var> wrts) {
  check(root);
  for (Var w : wrts) check(w);
  if (value(root).size() != 1) {
    throw ShapeError("gradients: root must be a scalar");
  }

  auto zeros_result = [&] {
    std::vector<Tensor> out;
    out.reserve(wrts.size());
    for (Var w : wrts) out.push_back(Tensor::zeros(value(w).shape()));
    return out;
  };

  const std::vector<char> useful = dependency_mask(wrts, root.id);
  if (!useful[root.id]) return zeros_result();

  std::vector<Tensor> adj(static_cast<std::size_t>(root.id) + 1);
  adj[root.id] = Tensor::full(value(root).shape(), 1.0);

  auto acc = [&](std::int32_t id) -> Tensor& {
    if (adj[id].empty()) adj[id] = Tensor::zeros(nodes_[id].value.shape());
    return adj[id];
  };
  auto want = [&](std::int32_t id) { return id >= 0 && useful[id]; };

  for (std::int32_t i = root.id; i >= 0; --i) {
    if (adj[i].empty()) continue;
    const Node& n = nodes_[i];
    const Tensor& g = adj[i];
    switch (n.kind) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd: {
        if (want(n.a0)) axpy(g.values(), 1.0, acc(n.a0).values());
        if (want(n.a1)) axpy(g.values(), 1.0, acc(n.a1).values());
        break;
      }
      case OpKind::kSub: {
        if (want(n.a0)) axpy(g.values(), 1.0, acc(n.a0).values());
        if (want(n.a1)) axpy(g.values(), -1.0, acc(n.a1).values());
        break;
      }
      case OpKind::kMul: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          const Tensor& vb = nodes_[n.a1].value;
          for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * vb[j];
        }
        if (want(n.a1)) {
          Tensor& d = acc(n.a1);
          const Tensor& va = nodes_[n.a0].value;
          for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * va[j];
        }
        break;
      }
      case OpKind::kScale: {
        if (want(n.a0)) axpy(g.values(), n.scalar, acc(n.a0).values());
        break;
      }
      case OpKind::kShift: {
        if (want(n.a0)) axpy(g.values(), 1.0, acc(n.a0).values());
        break;
      }
      case OpKind::kExp: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] * n.value[j];
        }
        break;
      }
      case OpKind::kLog: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          const Tensor& va = nodes_[n.a0].value;
          for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j] / va[j];
        }
        break;
      }
      case OpKind::kSqrt: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          for (std::size_t j = 0; j < g.size(); ++j) {
            d[j] += g[j] * 0.5 / n.value[j];
          }
        }
        break;
      }
      case OpKind::kRecip: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          for (std::size_t j = 0; j < g.size(); ++j) {
            d[j] -= g[j] * n.value[j] * n.value[j];
          }
        }
        break;
      }
      case OpKind::kSum: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          const double gv = g[0];
          for (std::size_t j = 0; j < d.size(); ++j) d[j] += gv;
        }
        break;
      }
      case OpKind::kDot: {
        const double gv = g[0];
        if (want(n.a0)) axpy(nodes_[n.a1].value.values(), gv, acc(n.a0).values());
        if (want(n.a1)) axpy(nodes_[n.a0].value.values(), gv, acc(n.a1).values());
        break;
      }
      case OpKind::kScaleBy: {
        if (want(n.a0)) {
          axpy(g.values(), nodes_[n.a1].value[0], acc(n.a0).values());
        }
        if (want(n.a1)) {
          acc(n.a1)[0] += gradflow::dot(g.values(), nodes_[n.a0].value.values());
        }
        break;
      }
      case OpKind::kBroadcastScalar: {
        if (want(n.a0)) {
          double s = 0.0;
          for (double v : g.values()) s += v;
          acc(n.a0)[0] += s;
        }
        break;
      }
      case OpKind::kMatMul: {
        if (want(n.a0)) matmul_a_bt_acc(g, nodes_[n.a1].value, acc(n.a0));
        if (want(n.a1)) matmul_at_b_acc(nodes_[n.a0].value, g, acc(n.a1));
        break;
      }
      case OpKind::kTranspose: {
        if (want(n.a0)) transpose_acc(g, acc(n.a0));
        break;
      }
      case OpKind::kReshape: {
        if (want(n.a0)) axpy(g.values(), 1.0, acc(n.a0).values());
        break;
      }
      case OpKind::kConv2d: {
        if (want(n.a0)) conv2d_input_adj_acc(g, nodes_[n.a1].value, acc(n.a0));
        if (want(n.a1)) conv2d_kernel_adj_acc(nodes_[n.a0].value, g, acc(n.a1));
        break;
      }
      case OpKind::kConv2dInputAdj: {
        if (want(n.a0)) conv2d_acc(g, nodes_[n.a1].value, acc(n.a0));
        if (want(n.a1)) conv2d_kernel_adj_acc(g, nodes_[n.a0].value, acc(n.a1));
        break;
      }
      case OpKind::kConv2dKernelAdj: {
        if (want(n.a0)) conv2d_input_adj_acc(nodes_[n.a1].value, g, acc(n.a0));
        if (want(n.a1)) conv2d_acc(nodes_[n.a0].value, g, acc(n.a1));
        break;
      }
      case OpKind::kAvgPool2: {
        if (want(n.a0)) avg_pool2_adj_acc(g, acc(n.a0));
        break;
      }
      case OpKind::kAvgPool2Adj: {
        if (want(n.a0)) avg_pool2_acc(g, acc(n.a0));
        break;
      }
      case OpKind::kSelectPositive: {
        const Tensor& vc = nodes_[n.a0].value;
        if (want(n.a1)) {
          Tensor& d = acc(n.a1);
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (vc[j] > 0.0) d[j] += g[j];
          }
        }
        if (want(n.a2)) {
          Tensor& d = acc(n.a2);
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (!(vc[j] > 0.0)) d[j] += g[j];
          }
        }
        break;
      }
      case OpKind::kChannelSum: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          const std::size_t hw = d.shape()[1] * d.shape()[2];
          for (std::size_t c = 0; c < g.size(); ++c) {
            double* p = d.data() + c * hw;
            const double gv = g[c];
            for (std::size_t j = 0; j < hw; ++j) p[j] += gv;
          }
        }
        break;
      }
      case OpKind::kChannelBroadcast: {
        if (want(n.a0)) {
          Tensor& d = acc(n.a0);
          const std::size_t hw =
              static_cast<std::size_t>(n.aux0) * static_cast<std::size_t>(n.aux1);
          for (std::size_t c = 0; c < d.size(); ++c) {
            const double* p = g.data() + c * hw;
            double s = 0.0;
            for (std::size_t j = 0; j < hw; ++j) s += p[j];
            d[c] += s;
          }
        }
        break;
      }
    }
    // Free adjoint buffers as soon as they are consumed.
    if (i != root.id) {
      bool is_target = false;
      for (Var w : wrts) {
        if (w.id == i) {
          is_target = true;
          break;
        }
      }
      if (!is_target) adj[i] = Tensor();
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrts.size());
  for (Var w : wrts) {
    if (w.id <= root.id && !adj[w.id].empty()) {
      out.push_back(std::move(adj[w.id]));
      adj[w.id] = Tensor();
    } else {
      out.push_back(Tensor::zeros(value(w).shape()));
    }
  }
  return out;
}

Tensor Tape::gradient(Var root, Var wrt) {
  const Var wrts[1] = {wrt};
  return std::move(gradients(root, wrts)[0]);
}

// ---------------------------------------------------------------------------
// Graph-mode backward sweep (recorded, differentiable)
// ---------------------------------------------------------------------------

Var Tape::gradient_graph(Var root, Var wrt) {
  check(root);
  check(wrt);
  if (value(root).size() != 1) {
    throw ShapeError("gradient_graph: root must be a scalar");
  }
  const Var targets[1] = {wrt};
  const std::vector<char> useful = dependency_mask(targets, root.id);
  if (!useful[root.id]) {
    return constant(Tensor::zeros(value(wrt).shape()));
  }

  std::vector<Var> adj(static_cast<std::size_t>(root.id) + 1);
  adj[root.id] = constant(Tensor::full(value(root).shape(), 1.0));

  auto want = [&](std::int32_t id) { return id >= 0 && useful[id]; };
  auto add_adj = [&](std::int32_t id, Var v) {
    adj[id] = adj[id].valid() ? add(adj[id], v) : v;
  };

  for (std::int32_t i = root.id; i >= 0; --i) {
    if (!adj[i].valid()) continue;
    // Copy the metadata: builder calls below may reallocate nodes_.
    const OpKind kind = nodes_[i].kind;
    const std::int32_t a0 = nodes_[i].a0, a1 = nodes_[i].a1, a2 = nodes_[i].a2;
    const double c = nodes_[i].scalar;
    const Var g = adj[i];
    const Var self{i};
    switch (kind) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd: {
        if (want(a0)) add_adj(a0, g);
        if (want(a1)) add_adj(a1, g);
        break;
      }
      case OpKind::kSub: {
        if (want(a0)) add_adj(a0, g);
        if (want(a1)) add_adj(a1, scale(g, -1.0));
        break;
      }
      case OpKind::kMul: {
        if (want(a0)) add_adj(a0, mul(g, Var{a1}));
        if (want(a1)) add_adj(a1, mul(g, Var{a0}));
        break;
      }
      case OpKind::kScale: {
        if (want(a0)) add_adj(a0, scale(g, c));
        break;
      }
      case OpKind::kShift: {
        if (want(a0)) add_adj(a0, g);
        break;
      }
      case OpKind::kExp: {
        if (want(a0)) add_adj(a0, mul(g, self));
        break;
      }
      case OpKind::kLog: {
        if (want(a0)) add_adj(a0, mul(g, recip(Var{a0})));
        break;
      }
      case OpKind::kSqrt: {
        if (want(a0)) add_adj(a0, scale(mul(g, recip(self)), 0.5));
        break;
      }
      case OpKind::kRecip: {
        if (want(a0)) add_adj(a0, scale(mul(g, mul(self, self)), -1.0));
        break;
      }
      case OpKind::kSum: {
        if (want(a0)) {
          add_adj(a0, broadcast_scalar(g, nodes_[a0].value.shape()));
        }
        break;
      }
      case OpKind::kDot: {
        if (want(a0)) add_adj(a0, scale_by(Var{a1}, g));
        if (want(a1)) add_adj(a1, scale_by(Var{a0}, g));
        break;
      }
      case OpKind::kScaleBy: {
        if (want(a0)) add_adj(a0, scale_by(g, Var{a1}));
        if (want(a1)) add_adj(a1, dot(g, Var{a0}));
        break;
      }
      case OpKind::kBroadcastScalar: {
        if (want(a0)) add_adj(a0, sum(g));
        break;
      }
      case OpKind::kMatMul: {
        if (want(a0)) add_adj(a0, matmul(g, transpose(Var{a1})));
        if (want(a1)) add_adj(a1, matmul(transpose(Var{a0}), g));
        break;
      }
      case OpKind::kTranspose: {
        if (want(a0)) add_adj(a0, transpose(g));
        break;
      }
      case OpKind::kReshape: {
        if (want(a0)) add_adj(a0, reshape(g, nodes_[a0].value.shape()));
        break;
      }
      case OpKind::kConv2d: {
        if (want(a0)) add_adj(a0, conv2d_input_adj(g, Var{a1}));
        if (want(a1)) {
          const std::size_t kh = nodes_[a1].value.shape()[2];
          const std::size_t kw = nodes_[a1].value.shape()[3];
          add_adj(a1, conv2d_kernel_adj(Var{a0}, g, kh, kw));
        }
        break;
      }
      case OpKind::kConv2dInputAdj: {
        if (want(a0)) add_adj(a0, conv2d(g, Var{a1}));
        if (want(a1)) {
          const std::size_t kh = nodes_[a1].value.shape()[2];
          const std::size_t kw = nodes_[a1].value.shape()[3];
          add_adj(a1, conv2d_kernel_adj(g, Var{a0}, kh, kw));
        }
        break;
      }
      case OpKind::kConv2dKernelAdj: {
        if (want(a0)) add_adj(a0, conv2d_input_adj(Var{a1}, g));
        if (want(a1)) add_adj(a1, conv2d(Var{a0}, g));
        break;
      }
      case OpKind::kAvgPool2: {
        if (want(a0)) add_adj(a0, avg_pool2_adj(g));
        break;
      }
      case OpKind::kAvgPool2Adj: {
        if (want(a0)) add_adj(a0, avg_pool2(g));
        break;
      }
      case OpKind::kSelectPositive: {
        if (want(a1) || want(a2)) {
          const Var zero = constant(Tensor::zeros(value(g).shape()));
          if (want(a1)) add_adj(a1, select_positive(Var{a0}, g, zero));
          if (want(a2)) add_adj(a2, select_positive(Var{a0}, zero, g));
        }
        break;
      }
      case OpKind::kChannelSum: {
        if (want(a0)) {
          const auto& s = nodes_[a0].value.shape();
          add_adj(a0, channel_broadcast(g, s[1], s[2]));
        }
        break;
      }
      case OpKind::kChannelBroadcast: {
        if (want(a0)) add_adj(a0, channel_sum(g));
        break;
      }
    }
  }
  if (!adj[wrt.id].valid()) {
    return constant(Tensor::zeros(value(wrt).shape()));
  }
  return adj[wrt.id];
}

// ---------------------------------------------------------------------------
// Compositions
// ---------------------------------------------------------------------------

Var neg(Tape& t, Var a) { return t.scale(a, -1.0); }

Var abs_val(Tape& t, Var a) { return t.select_positive(a, a, neg(t, a)); }

Var elu(Tape& t, Var a) {
  return t.select_positive(a, a, t.shift(t.exp(a), -1.0));
}

Var softplus(Tape& t, Var a) {
  const Var zero = t.constant(Tensor::zeros(t.value(a).shape()));
  const Var positive_part = t.select_positive(a, a, zero);
  const Var em = t.exp(neg(t, abs_val(t, a)));
  return t.add(positive_part, t.log(t.shift(em, 1.0)));
}

Var sigmoid(Tape& t, Var a) { return t.exp(neg(t, softplus(t, neg(t, a)))); }

Var sqnorm(Tape& t, Var a) { return t.dot(a, a); }

Var cosine_sq(Tape& t, Var u, Var w) {
  const Var num = t.dot(u, w);
  const Var den = t.mul(t.dot(u, u), t.dot(w, w));
  return t.mul(t.mul(num, num), t.recip(den));
}

Var bce_with_logit(Tape& t, Var logit, double label) {
  return t.add(softplus(t, logit), t.scale(logit, -label));
}

}  // namespace gradflow::ad
