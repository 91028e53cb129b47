#pragma once

// Differentiable primitives. Every function is pure in its inputs and records
// a backward closure when graph recording is enabled.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "hff/autograd.hpp"

namespace hff {

enum class PadMode { kZeros, kReflect };

struct ConvOptions {
  Index stride = 1;
  Index pad = 0;
  // Weight [G,1,kh,kw] applied to every input channel; output channel
  // g * Cin + c holds kernel g on channel c (kernel-major).
  bool depthwise = false;
};

enum class Transpose { kNo, kYes };

namespace detail {

template <typename Scalar>
using ConstMap = typename Tensor<Scalar>::ConstMatrixMap;
template <typename Scalar>
using Map = typename Tensor<Scalar>::MatrixMap;

// out (+)= op(a) * op(b)
template <typename Scalar, typename A, typename B>
void gemm(Map<Scalar> out, const A& a, bool ta, const B& b, bool tb, bool accumulate) {
  if (!ta && !tb) {
    if (accumulate) out.noalias() += a * b; else out.noalias() = a * b;
  } else if (ta && !tb) {
    if (accumulate) out.noalias() += a.transpose() * b; else out.noalias() = a.transpose() * b;
  } else if (!ta && tb) {
    if (accumulate) out.noalias() += a * b.transpose(); else out.noalias() = a * b.transpose();
  } else {
    if (accumulate) out.noalias() += a.transpose() * b.transpose();
    else out.noalias() = a.transpose() * b.transpose();
  }
}

inline Index conv_extent(Index in, Index k, Index stride, Index pad, const char* what) {
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  const Index span = in + 2 * pad - k;
  require(span >= 0, std::string("conv2d: kernel larger than padded ") + what);
  require(span % stride == 0, std::string("conv2d: non-integer output ") + what);
  return span / stride + 1;
}

// First and one-past-last output index whose tap `t` lands inside [0, in).
inline void tap_range(Index t, Index in, Index out, Index stride, Index pad, Index& lo, Index& hi) {
  // input index = o * stride + t - pad
  const Index shift = pad - t;
  lo = shift > 0 ? (shift + stride - 1) / stride : 0;
  const Index top = in - 1 + shift;
  hi = top < 0 ? 0 : std::min(out, top / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename Scalar>
void im2col(const Scalar* in, Index channels, Index h, Index w, Index kh, Index kw, Index stride,
            Index pad, Index ho, Index wo, Scalar* col) {
  const Index plane = ho * wo;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = col + ((c * kh + i) * kw + j) * plane;
        std::fill(row, row + plane, Scalar(0));
        Index x0, x1;
        tap_range(j, w, wo, stride, pad, x0, x1);
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          const Scalar* src = in + (c * h + iy) * w;
          Scalar* dst = row + oy * wo;
          for (Index ox = x0; ox < x1; ++ox) dst[ox] = src[ox * stride + j - pad];
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, Index channels, Index h, Index w, Index kh, Index kw, Index stride,
                Index pad, Index ho, Index wo, Scalar* out) {
  const Index plane = ho * wo;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const Scalar* row = col + ((c * kh + i) * kw + j) * plane;
        Index x0, x1;
        tap_range(j, w, wo, stride, pad, x0, x1);
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = out + (c * h + iy) * w;
          const Scalar* src = row + oy * wo;
          for (Index ox = x0; ox < x1; ++ox) dst[ox * stride + j - pad] += src[ox];
        }
      }
    }
  }
}

// Single-plane sliding cross-correlation: out += sum_taps k * in.
template <typename Scalar>
void correlate_plane(const Scalar* in, Index h, Index w, const Scalar* k, Index kh, Index kw,
                     Index stride, Index pad, Scalar* out, Index ho, Index wo) {
  for (Index i = 0; i < kh; ++i) {
    for (Index j = 0; j < kw; ++j) {
      const Scalar kv = k[i * kw + j];
      if (kv == Scalar(0)) continue;
      Index x0, x1;
      tap_range(j, w, wo, stride, pad, x0, x1);
      for (Index oy = 0; oy < ho; ++oy) {
        const Index iy = oy * stride + i - pad;
        if (iy < 0 || iy >= h) continue;
        const Scalar* src = in + iy * w + j - pad;
        Scalar* dst = out + oy * wo;
        for (Index ox = x0; ox < x1; ++ox) dst[ox] += kv * src[ox * stride];
      }
    }
  }
}

}  // namespace detail

/// Sliding-window cross-correlation (no kernel flip). `bias` may be undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   ConvOptions opt = {}) {
  require(x.rank() == 4, "conv2d: input must be rank 4, got " + to_string(x.shape()));
  require(weight.rank() == 4, "conv2d: weight must be rank 4, got " + to_string(weight.shape()));
  const Index batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index kh = weight.dim(2), kw = weight.dim(3);
  require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got " + to_string(weight.shape()));
  const Index cout = opt.depthwise ? weight.dim(0) * cin : weight.dim(0);
  if (opt.depthwise) {
    require(weight.dim(1) == 1, "conv2d: depthwise weight must be [G,1,kh,kw], got " + to_string(weight.shape()) +
                                    " for input " + to_string(x.shape()));
  } else {
    require(weight.dim(1) == cin, "conv2d: weight " + to_string(weight.shape()) + " does not match input " +
                                      to_string(x.shape()));
  }
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == cout,
            "conv2d: bias " + to_string(bias.shape()) + " does not match " + std::to_string(cout) + " outputs");
  }
  const Index ho = detail::conv_extent(h, kh, opt.stride, opt.pad, "height");
  const Index wo = detail::conv_extent(w, kw, opt.stride, opt.pad, "width");
  const Index plane = ho * wo, in_plane = h * w;

  Tensor<Scalar> out({batch, cout, ho, wo});
  const Tensor<Scalar>& xv = x.value();
  const Tensor<Scalar>& wv = weight.value();
  const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.pad == 0;

  if (opt.depthwise) {
    const Index groups = weight.dim(0);
    for (Index b = 0; b < batch; ++b)
      for (Index g = 0; g < groups; ++g)
        for (Index c = 0; c < cin; ++c)
          detail::correlate_plane(xv.data() + (b * cin + c) * in_plane, h, w, wv.data() + g * kh * kw, kh, kw,
                                  opt.stride, opt.pad, out.data() + (b * cout + g * cin + c) * plane, ho, wo);
  } else {
    const Index ckk = cin * kh * kw;
    auto wm = wv.matrix(cout, ckk);
    Tensor<Scalar> col;
    if (!pointwise) col = Tensor<Scalar>({ckk, plane});
    for (Index b = 0; b < batch; ++b) {
      auto ob = out.matrix(cout, plane, b * cout * plane);
      if (pointwise) {
        ob.noalias() = wm * xv.matrix(cin, plane, b * cin * in_plane);
      } else {
        detail::im2col(xv.data() + b * cin * in_plane, cin, h, w, kh, kw, opt.stride, opt.pad, ho, wo, col.data());
        ob.noalias() = wm * col.matrix(ckk, plane);
      }
    }
  }
  if (bias.defined()) {
    const auto& bv = bias.value();
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < cout; ++c) out.matrix(1, plane, (b * cout + c) * plane).array() += bv[c];
  }

  std::vector<Var<Scalar>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [=](const Node<Scalar>& self) {
    const Tensor<Scalar>& dy = self.grad;
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& wn = *self.parents[1];
    const Tensor<Scalar>& xv = xn.value;
    const Tensor<Scalar>& wv = wn.value;
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Tensor<Scalar>& db = grad_slot(*self.parents[2]);
      for (Index b = 0; b < batch; ++b)
        for (Index c = 0; c < cout; ++c) db[c] += dy.matrix(1, plane, (b * cout + c) * plane).sum();
    }
    if (opt.depthwise) {
      const Index groups = wv.dim(0);
      Tensor<Scalar>* dx = xn.requires_grad ? &grad_slot(xn) : nullptr;
      Tensor<Scalar>* dw = wn.requires_grad ? &grad_slot(wn) : nullptr;
      for (Index b = 0; b < batch; ++b) {
        for (Index g = 0; g < groups; ++g) {
          for (Index c = 0; c < cin; ++c) {
            const Scalar* dyp = dy.data() + (b * cout + g * cin + c) * plane;
            const Scalar* xp = xv.data() + (b * cin + c) * in_plane;
            const Scalar* kp = wv.data() + g * kh * kw;
            for (Index i = 0; i < kh; ++i) {
              for (Index j = 0; j < kw; ++j) {
                Index x0, x1;
                detail::tap_range(j, w, wo, opt.stride, opt.pad, x0, x1);
                const Scalar kv = kp[i * kw + j];
                Scalar acc = 0;
                for (Index oy = 0; oy < ho; ++oy) {
                  const Index iy = oy * opt.stride + i - opt.pad;
                  if (iy < 0 || iy >= h) continue;
                  const Index base = iy * w + j - opt.pad;
                  const Scalar* drow = dyp + oy * wo;
                  if (dx && kv != Scalar(0)) {
                    Scalar* dxp = dx->data() + (b * cin + c) * in_plane + base;
                    for (Index ox = x0; ox < x1; ++ox) dxp[ox * opt.stride] += kv * drow[ox];
                  }
                  if (dw) {
                    const Scalar* src = xp + base;
                    for (Index ox = x0; ox < x1; ++ox) acc += drow[ox] * src[ox * opt.stride];
                  }
                }
                if (dw) (*dw)[g * kh * kw + i * kw + j] += acc;
              }
            }
          }
        }
      }
      return;
    }
    const Index ckk = cin * kh * kw;
    Tensor<Scalar> col;
    if (!pointwise) col = Tensor<Scalar>({ckk, plane});
    for (Index b = 0; b < batch; ++b) {
      auto dyb = dy.matrix(cout, plane, b * cout * plane);
      if (wn.requires_grad) {
        auto dwm = grad_slot(wn).matrix(cout, ckk);
        if (pointwise) {
          dwm.noalias() += dyb * xv.matrix(cin, plane, b * cin * in_plane).transpose();
        } else {
          detail::im2col(xv.data() + b * cin * in_plane, cin, h, w, kh, kw, opt.stride, opt.pad, ho, wo,
                         col.data());
          dwm.noalias() += dyb * col.matrix(ckk, plane).transpose();
        }
      }
      if (xn.requires_grad) {
        Tensor<Scalar>& dx = grad_slot(xn);
        if (pointwise) {
          dx.matrix(cin, plane, b * cin * in_plane).noalias() += wv.matrix(cout, ckk).transpose() * dyb;
        } else {
          col.matrix(ckk, plane).noalias() = wv.matrix(cout, ckk).transpose() * dyb;
          detail::col2im_add(col.data(), cin, h, w, kh, kw, opt.stride, opt.pad, ho, wo,
                             dx.data() + b * cin * in_plane);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, ConvOptions opt = {}) {
  return conv2d(x, weight, Var<Scalar>(), opt);
}

/// Spatial padding of a rank-4 tensor. Reflect mode mirrors about the edge
/// sample without repeating it and requires pad < extent.
template <typename Scalar>
Var<Scalar> pad2d(const Var<Scalar>& x, Index pad, PadMode mode) {
  require(x.rank() == 4, "pad2d: input must be rank 4");
  require(pad >= 0, "pad2d: pad must be >= 0");
  const Index n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (mode == PadMode::kReflect) {
    require(pad < h && pad < w, "pad2d: reflect pad must be smaller than the spatial extents of " +
                                    to_string(x.shape()));
  }
  const Index hp = h + 2 * pad, wp = w + 2 * pad;
  auto source = [mode](Index i, Index extent) -> Index {
    if (i >= 0 && i < extent) return i;
    if (mode == PadMode::kZeros) return -1;
    return i < 0 ? -i : 2 * (extent - 1) - i;
  };
  std::vector<Index> rows(static_cast<std::size_t>(hp)), cols(static_cast<std::size_t>(wp));
  for (Index i = 0; i < hp; ++i) rows[static_cast<std::size_t>(i)] = source(i - pad, h);
  for (Index j = 0; j < wp; ++j) cols[static_cast<std::size_t>(j)] = source(j - pad, w);

  Tensor<Scalar> out({x.dim(0), x.dim(1), hp, wp});
  const auto& xv = x.value();
  for (Index p = 0; p < n; ++p)
    for (Index i = 0; i < hp; ++i) {
      const Index si = rows[static_cast<std::size_t>(i)];
      if (si < 0) continue;
      for (Index j = 0; j < wp; ++j) {
        const Index sj = cols[static_cast<std::size_t>(j)];
        if (sj >= 0) out[(p * hp + i) * wp + j] = xv[(p * h + si) * w + sj];
      }
    }
  return make_result(std::move(out), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index p = 0; p < n; ++p)
      for (Index i = 0; i < hp; ++i) {
        const Index si = rows[static_cast<std::size_t>(i)];
        if (si < 0) continue;
        for (Index j = 0; j < wp; ++j) {
          const Index sj = cols[static_cast<std::size_t>(j)];
          if (sj >= 0) dx[(p * h + si) * w + sj] += self.grad[(p * hp + i) * wp + j];
        }
      }
  });
}

/// op(a) * op(b) for rank-2 operands, or batch-wise for rank-3 operands.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b, Transpose ta = Transpose::kNo,
                   Transpose tb = Transpose::kNo) {
  require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
          "matmul: operands must both be rank 2 or rank 3, got " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  const bool batched = a.rank() == 3;
  const Index batch = batched ? a.dim(0) : 1;
  if (batched) {
    require(a.dim(0) == b.dim(0), "matmul: batch mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Index ar = a.dim(a.rank() - 2), ac = a.dim(a.rank() - 1);
  const Index br = b.dim(b.rank() - 2), bc = b.dim(b.rank() - 1);
  const bool tra = ta == Transpose::kYes, trb = tb == Transpose::kYes;
  const Index m = tra ? ac : ar, k = tra ? ar : ac;
  const Index k2 = trb ? bc : br, n = trb ? br : bc;
  require(k == k2, "matmul: inner extents differ for " + to_string(a.shape()) + " and " + to_string(b.shape()));

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<Scalar> out(out_shape);
  for (Index i = 0; i < batch; ++i) {
    detail::gemm<Scalar>(out.matrix(m, n, i * m * n), a.value().matrix(ar, ac, i * ar * ac), tra,
                         b.value().matrix(br, bc, i * br * bc), trb, false);
  }
  return make_result(std::move(out), {a, b}, [=](const Node<Scalar>& self) {
    Node<Scalar>& an = *self.parents[0];
    Node<Scalar>& bn = *self.parents[1];
    for (Index i = 0; i < batch; ++i) {
      const auto dc = self.grad.matrix(m, n, i * m * n);
      const auto av = an.value.matrix(ar, ac, i * ar * ac);
      const auto bv = bn.value.matrix(br, bc, i * br * bc);
      if (an.requires_grad) {
        auto da = grad_slot(an).matrix(ar, ac, i * ar * ac);
        // C = op(A) op(B): dA = dC op(B)^T, transposed back when A was transposed.
        if (!tra) detail::gemm<Scalar>(da, dc, false, bv, !trb, true);
        else detail::gemm<Scalar>(da, bv, trb, dc, true, true);
      }
      if (bn.requires_grad) {
        auto db = grad_slot(bn).matrix(br, bc, i * br * bc);
        if (!trb) detail::gemm<Scalar>(db, av, !tra, dc, false, true);
        else detail::gemm<Scalar>(db, dc, true, av, tra, true);
      }
    }
  });
}

/// Swaps the two trailing axes of a rank-2 or rank-3 tensor.
template <typename Scalar>
Var<Scalar> transpose_last2(const Var<Scalar>& x) {
  require(x.rank() == 2 || x.rank() == 3, "transpose_last2: rank must be 2 or 3");
  const bool batched = x.rank() == 3;
  const Index batch = batched ? x.dim(0) : 1;
  const Index r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  Tensor<Scalar> out(batched ? Shape{batch, c, r} : Shape{c, r});
  for (Index i = 0; i < batch; ++i) out.matrix(c, r, i * r * c) = x.value().matrix(r, c, i * r * c).transpose();
  return make_result(std::move(out), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index i = 0; i < batch; ++i)
      dx.matrix(r, c, i * r * c) += self.grad.matrix(c, r, i * r * c).transpose();
  });
}

/// Numerically stable softmax along `axis`.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis) {
  require(axis >= 0 && axis < x.rank(), "softmax: axis out of range for " + to_string(x.shape()));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index n = x.dim(axis);
  Tensor<Scalar> y(x.shape());
  const auto& xv = x.value();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      Scalar total = 0;
      for (Index k = 0; k < n; ++k) {
        const Scalar e = std::exp(xv[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (Index k = 0; k < n; ++k) y[base + k * inner] /= total;
    }
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    const auto& yv = self.value;
    const auto& dy = self.grad;
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * n * inner + i;
        Scalar dot = 0;
        for (Index k = 0; k < n; ++k) dot += dy[base + k * inner] * yv[base + k * inner];
        for (Index k = 0; k < n; ++k) {
          const Index at = base + k * inner;
          dx[at] += yv[at] * (dy[at] - dot);
        }
      }
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.array() = Scalar(1) / (Scalar(1) + (-x.value().array()).exp());
  return make_result(std::move(y), {x}, [](const Node<Scalar>& self) {
    const auto& yv = self.value.array();
    grad_slot(*self.parents[0]).array() += self.grad.array() * yv * (Scalar(1) - yv);
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.array() = x.value().array().max(Scalar(0));
  return make_result(std::move(y), {x}, [](const Node<Scalar>& self) {
    const auto& xv = self.parents[0]->value.array();
    grad_slot(*self.parents[0]).array() += (xv > Scalar(0)).select(self.grad.array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<Scalar> y(a.shape());
  y.array() = a.value().array() + b.value().array();
  return make_result(std::move(y), {a, b}, [](const Node<Scalar>& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<Scalar> y(a.shape());
  y.array() = a.value().array() - b.value().array();
  return make_result(std::move(y), {a, b}, [](const Node<Scalar>& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) grad_slot(*self.parents[1]).array() -= self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<Scalar> y(a.shape());
  y.array() = a.value().array() * b.value().array();
  return make_result(std::move(y), {a, b}, [](const Node<Scalar>& self) {
    Node<Scalar>& an = *self.parents[0];
    Node<Scalar>& bn = *self.parents[1];
    if (an.requires_grad) grad_slot(an).array() += self.grad.array() * bn.value.array();
    if (bn.requires_grad) grad_slot(bn).array() += self.grad.array() * an.value.array();
  });
}

/// a * x + c, elementwise with scalar coefficients.
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, Scalar a, Scalar c = Scalar(0)) {
  Tensor<Scalar> y(x.shape());
  y.array() = x.value().array() * a + c;
  return make_result(std::move(y), {x}, [a](const Node<Scalar>& self) {
    grad_slot(*self.parents[0]).array() += self.grad.array() * a;
  });
}

template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  require(lo <= hi, "clamp: empty interval");
  Tensor<Scalar> y(x.shape());
  y.array() = x.value().array().max(lo).min(hi);
  return make_result(std::move(y), {x}, [lo, hi](const Node<Scalar>& self) {
    const auto& xv = self.parents[0]->value.array();
    grad_slot(*self.parents[0]).array() += ((xv >= lo) && (xv <= hi)).select(self.grad.array(), Scalar(0));
  });
}

/// Divides channel c of a rank-4 tensor by divisors[c].
template <typename Scalar>
Var<Scalar> divide_channels(const Var<Scalar>& x, std::vector<Scalar> divisors) {
  require(x.rank() == 4 && x.dim(1) == static_cast<Index>(divisors.size()),
          "divide_channels: need one divisor per channel of " + to_string(x.shape()));
  const Index batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index k = 0; k < c; ++k) {
      const Index off = (b * c + k) * plane;
      y.matrix(1, plane, off).array() = x.value().matrix(1, plane, off).array() / divisors[static_cast<std::size_t>(k)];
    }
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index b = 0; b < batch; ++b)
      for (Index k = 0; k < c; ++k) {
        const Index off = (b * c + k) * plane;
        dx.matrix(1, plane, off).array() += self.grad.matrix(1, plane, off).array() / divisors[static_cast<std::size_t>(k)];
      }
  });
}

/// x[B,C,H,W] scaled per position by m[B,1,H,W].
template <typename Scalar>
Var<Scalar> mul_spatial(const Var<Scalar>& x, const Var<Scalar>& m) {
  require(x.rank() == 4 && m.rank() == 4 && m.dim(1) == 1 && m.dim(0) == x.dim(0) && m.dim(2) == x.dim(2) &&
              m.dim(3) == x.dim(3),
          "mul_spatial: map " + to_string(m.shape()) + " does not match features " + to_string(x.shape()));
  const Index batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y(x.shape());
  for (Index b = 0; b < batch; ++b) {
    const auto mp = m.value().matrix(1, plane, b * plane).array();
    for (Index k = 0; k < c; ++k) {
      const Index off = (b * c + k) * plane;
      y.matrix(1, plane, off).array() = x.value().matrix(1, plane, off).array() * mp;
    }
  }
  return make_result(std::move(y), {x, m}, [=](const Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& mn = *self.parents[1];
    for (Index b = 0; b < batch; ++b) {
      for (Index k = 0; k < c; ++k) {
        const Index off = (b * c + k) * plane;
        const auto g = self.grad.matrix(1, plane, off).array();
        if (xn.requires_grad) grad_slot(xn).matrix(1, plane, off).array() += g * mn.value.matrix(1, plane, b * plane).array();
        if (mn.requires_grad) grad_slot(mn).matrix(1, plane, b * plane).array() += g * xn.value.matrix(1, plane, off).array();
      }
    }
  });
}

/// Concatenation along axis 1 (channels for rank 4, features for rank 2).
template <typename Scalar>
Var<Scalar> channel_concat(const std::vector<Var<Scalar>>& parts) {
  require(!parts.empty(), "channel_concat: no inputs");
  const Shape& first = parts.front().shape();
  require(first.size() >= 2, "channel_concat: inputs must have rank >= 2");
  Index inner = 1;
  for (std::size_t i = 2; i < first.size(); ++i) inner *= first[i];
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(s.size() == first.size() && s[0] == first[0], "channel_concat: incompatible " + to_string(s) + " vs " +
                                                              to_string(first));
    for (std::size_t i = 2; i < s.size(); ++i)
      require(s[i] == first[i], "channel_concat: incompatible " + to_string(s) + " vs " + to_string(first));
    total += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = total;
  const Index batch = first[0];
  Tensor<Scalar> y(out_shape);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const Index len = p.dim(1) * inner;
    for (Index b = 0; b < batch; ++b)
      y.matrix(1, len, b * total * inner + at * inner) = p.value().matrix(1, len, b * len);
    at += p.dim(1);
  }
  return make_result(std::move(y), parts, [=](const Node<Scalar>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node<Scalar>& pn = *self.parents[k];
      if (!pn.requires_grad) continue;
      const Index len = pn.value.dim(1) * inner;
      Tensor<Scalar>& d = grad_slot(pn);
      for (Index b = 0; b < batch; ++b)
        d.matrix(1, len, b * len) += self.grad.matrix(1, len, b * total * inner + offsets[k] * inner);
    }
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> y = x.value().reshaped(std::move(shape));
  return make_result(std::move(y), {x}, [](const Node<Scalar>& self) {
    grad_slot(*self.parents[0]).array() += self.grad.array();
  });
}

/// flt: [C,H,W] -> [C,HW], or [B,C,H,W] -> [B,C,HW], row-major order kept.
template <typename Scalar>
Var<Scalar> flatten(const Var<Scalar>& x) {
  if (x.rank() == 3) return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  require(x.rank() == 4, "flatten: rank must be 3 or 4, got " + to_string(x.shape()));
  return reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
}

/// Inverse of flatten.
template <typename Scalar>
Var<Scalar> unflatten(const Var<Scalar>& x, Index h, Index w) {
  require(x.dim(x.rank() - 1) == h * w, "unflatten: trailing extent is not " + std::to_string(h * w));
  if (x.rank() == 2) return reshape(x, {x.dim(0), h, w});
  require(x.rank() == 3, "unflatten: rank must be 2 or 3");
  return reshape(x, {x.dim(0), x.dim(1), h, w});
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first maximum.
template <typename Scalar>
Var<Scalar> maxpool2d(const Var<Scalar>& x) {
  require(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
          "maxpool2d: spatial extents must be even, got " + to_string(x.shape()));
  const Index n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / 2, wo = w / 2;
  Tensor<Scalar> y({x.dim(0), x.dim(1), ho, wo});
  std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
  const auto& xv = x.value();
  for (Index p = 0; p < n; ++p)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        Index best = (p * h + 2 * i) * w + 2 * j;
        for (Index di = 0; di < 2; ++di)
          for (Index dj = 0; dj < 2; ++dj) {
            const Index at = (p * h + 2 * i + di) * w + 2 * j + dj;
            if (xv[at] > xv[best]) best = at;
          }
        const Index o = (p * ho + i) * wo + j;
        y[o] = xv[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
  return make_result(std::move(y), {x}, [argmax = std::move(argmax)](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[static_cast<Index>(o)];
  });
}

/// Non-overlapping average pooling by an integer factor.
template <typename Scalar>
Var<Scalar> avgpool2d(const Var<Scalar>& x, Index factor) {
  require(x.rank() == 4 && factor >= 1 && x.dim(2) % factor == 0 && x.dim(3) % factor == 0,
          "avgpool2d: extents of " + to_string(x.shape()) + " not divisible by " + std::to_string(factor));
  if (factor == 1) return x;
  const Index n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / factor, wo = w / factor;
  const Scalar inv = Scalar(1) / Scalar(factor * factor);
  Tensor<Scalar> y({x.dim(0), x.dim(1), ho, wo});
  const auto& xv = x.value();
  for (Index p = 0; p < n; ++p)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) y[(p * ho + i / factor) * wo + j / factor] += xv[(p * h + i) * w + j];
  y.array() *= inv;
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index p = 0; p < n; ++p)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) dx[(p * h + i) * w + j] += self.grad[(p * ho + i / factor) * wo + j / factor] * inv;
  });
}

/// Average-pools to a target spatial size that evenly divides the input.
template <typename Scalar>
Var<Scalar> downsample(const Var<Scalar>& x, Index target_h, Index target_w) {
  require(x.rank() == 4 && target_h > 0 && target_w > 0 && x.dim(2) % target_h == 0 && x.dim(3) % target_w == 0 &&
              x.dim(2) / target_h == x.dim(3) / target_w,
          "downsample: cannot pool " + to_string(x.shape()) + " to " + std::to_string(target_h) + "x" +
              std::to_string(target_w));
  return avgpool2d(x, x.dim(2) / target_h);
}

/// [B,C,H,W] -> [B,C,1,1] spatial mean.
template <typename Scalar>
Var<Scalar> global_avgpool(const Var<Scalar>& x) {
  require(x.rank() == 4, "global_avgpool: input must be rank 4");
  const Index n = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({x.dim(0), x.dim(1), 1, 1});
  for (Index p = 0; p < n; ++p) y[p] = x.value().matrix(1, plane, p * plane).sum() / Scalar(plane);
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index p = 0; p < n; ++p) dx.matrix(1, plane, p * plane).array() += self.grad[p] / Scalar(plane);
  });
}

/// Per-position maximum over channels: [B,C,H,W] -> [B,1,H,W].
template <typename Scalar>
Var<Scalar> channel_max(const Var<Scalar>& x) {
  require(x.rank() == 4, "channel_max: input must be rank 4");
  const Index batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({batch, 1, x.dim(2), x.dim(3)});
  std::vector<Index> argmax(static_cast<std::size_t>(batch * plane));
  const auto& xv = x.value();
  for (Index b = 0; b < batch; ++b)
    for (Index q = 0; q < plane; ++q) {
      Index best = b * c * plane + q;
      for (Index k = 1; k < c; ++k) {
        const Index at = (b * c + k) * plane + q;
        if (xv[at] > xv[best]) best = at;
      }
      y[b * plane + q] = xv[best];
      argmax[static_cast<std::size_t>(b * plane + q)] = best;
    }
  return make_result(std::move(y), {x}, [argmax = std::move(argmax)](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[static_cast<Index>(o)];
  });
}

/// Per-position mean over channels: [B,C,H,W] -> [B,1,H,W].
template <typename Scalar>
Var<Scalar> channel_avg(const Var<Scalar>& x) {
  require(x.rank() == 4, "channel_avg: input must be rank 4");
  const Index batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y({batch, 1, x.dim(2), x.dim(3)});
  for (Index b = 0; b < batch; ++b) {
    auto yb = y.matrix(1, plane, b * plane);
    for (Index k = 0; k < c; ++k) yb += x.value().matrix(1, plane, (b * c + k) * plane);
    yb /= Scalar(c);
  }
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index b = 0; b < batch; ++b)
      for (Index k = 0; k < c; ++k)
        dx.matrix(1, plane, (b * c + k) * plane) += self.grad.matrix(1, plane, b * plane) / Scalar(c);
  });
}

/// x[N,In] * w[Out,In]^T + b[Out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require(x.rank() == 2 && weight.rank() == 2 && weight.dim(1) == x.dim(1),
          "linear: weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
  const Index n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == out, "linear: bias does not match weight");
  Tensor<Scalar> y({n, out});
  y.matrix(n, out).noalias() = x.value().matrix(n, in) * weight.value().matrix(out, in).transpose();
  if (bias.defined()) y.matrix(n, out).rowwise() += bias.value().matrix(1, out).row(0);
  std::vector<Var<Scalar>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(std::move(y), std::move(parents), [=](const Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& wn = *self.parents[1];
    const auto dy = self.grad.matrix(n, out);
    if (xn.requires_grad) grad_slot(xn).matrix(n, in).noalias() += dy * wn.value.matrix(out, in);
    if (wn.requires_grad) grad_slot(wn).matrix(out, in).noalias() += dy.transpose() * xn.value.matrix(n, in);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad)
      grad_slot(*self.parents[2]).matrix(1, out) += dy.colwise().sum();
  });
}

/// Scales each row of x[N,D] to unit Euclidean norm (eps guards zero rows).
template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x, Scalar eps = Scalar(1e-12)) {
  require(x.rank() == 2, "l2_normalize_rows: input must be rank 2");
  const Index n = x.dim(0), d = x.dim(1);
  Tensor<Scalar> y(x.shape());
  std::vector<Scalar> norms(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Scalar norm = std::sqrt(x.value().matrix(n, d).row(i).squaredNorm() + eps);
    norms[static_cast<std::size_t>(i)] = norm;
    y.matrix(n, d).row(i) = x.value().matrix(n, d).row(i) / norm;
  }
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    auto dx = grad_slot(*self.parents[0]).matrix(n, d);
    const auto yv = self.value.matrix(n, d);
    const auto dy = self.grad.matrix(n, d);
    for (Index i = 0; i < n; ++i) {
      const Scalar proj = yv.row(i).dot(dy.row(i));
      dx.row(i) += (dy.row(i) - yv.row(i) * proj) / norms[static_cast<std::size_t>(i)];
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> y = Tensor<Scalar>::scalar(x.value().array().sum());
  return make_result(std::move(y), {x}, [](const Node<Scalar>& self) {
    grad_slot(*self.parents[0]).array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return affine(sum(x), Scalar(1) / Scalar(x.value().size()));
}

/// Sum of x weighted elementwise by a constant tensor of the same shape.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights) {
  require(x.shape() == weights.shape(), "weighted_sum: shape mismatch");
  Tensor<Scalar> y = Tensor<Scalar>::scalar((x.value().array() * weights.array()).sum());
  return make_result(std::move(y), {x}, [weights](const Node<Scalar>& self) {
    grad_slot(*self.parents[0]).array() += self.grad[0] * weights.array();
  });
}

/// Column j of x[N,D] as a rank-1 tensor [N].
template <typename Scalar>
Var<Scalar> take_column(const Var<Scalar>& x, Index j) {
  require(x.rank() == 2 && j >= 0 && j < x.dim(1), "take_column: column out of range");
  const Index n = x.dim(0), d = x.dim(1);
  Tensor<Scalar> y({n});
  for (Index i = 0; i < n; ++i) y[i] = x.value()[i * d + j];
  return make_result(std::move(y), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    for (Index i = 0; i < n; ++i) dx[i * d + j] += self.grad[i];
  });
}

}  // namespace hff
