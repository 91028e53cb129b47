#pragma once

#include <array>
#include <vector>

#include "hff/ops.hpp"

namespace hff {

/// The three fixed 5x5 SRM high-pass kernels. Coefficients are stored as
/// integers and divided after filtering, so every kernel has an exactly zero
/// response to a constant field.
struct SrmKernelBank {
  static constexpr int kKernels = 3;
  static constexpr int kSize = 5;

  // SQUARE 3x3, SQUARE 5x5 ("KV") and the second-order row kernel.
  std::array<std::array<int, kSize * kSize>, kKernels> kernels{{
      {0, 0, 0, 0, 0,
       0, -1, 2, -1, 0,
       0, 2, -4, 2, 0,
       0, -1, 2, -1, 0,
       0, 0, 0, 0, 0},
      {-1, 2, -2, 2, -1,
       2, -6, 8, -6, 2,
       -2, 8, -12, 8, -2,
       2, -6, 8, -6, 2,
       -1, 2, -2, 2, -1},
      {0, 0, 0, 0, 0,
       0, 0, 0, 0, 0,
       0, 1, -2, 1, 0,
       0, 0, 0, 0, 0,
       0, 0, 0, 0, 0},
  }};
  std::array<int, kKernels> divisors{4, 12, 2};
  // Residual-image truncation threshold; 0 disables clipping.
  double clip_threshold = 2.0;

  template <typename Scalar>
  Tensor<Scalar> weight() const {
    Tensor<Scalar> w({kKernels, 1, kSize, kSize});
    for (int k = 0; k < kKernels; ++k)
      for (int i = 0; i < kSize * kSize; ++i) w[k * kSize * kSize + i] = static_cast<Scalar>(kernels[k][i]);
    return w;
  }
};

/// Depthwise SRM filtering with reflect padding: [B,C,H,W] -> [B,3C,H,W],
/// kernel-major channel order. Each tap is applied to the difference from
/// the centre sample, which equals the plain correlation because the integer
/// coefficients sum to zero, and makes the response to any constant field
/// exactly zero. Gradients reach `x` only.
template <typename Scalar>
Var<Scalar> srm_filter(const Var<Scalar>& x, const SrmKernelBank& bank) {
  require(x.rank() == 4, "srm_filter: input must be rank 4, got " + to_string(x.shape()));
  constexpr Index kHalf = SrmKernelBank::kSize / 2;
  const Index batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
  require(h > kHalf && w > kHalf, "srm_filter: spatial extents of " + to_string(x.shape()) + " too small for reflect padding");
  auto reflect = [](Index i, Index n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); };
  // rows[t][y] / cols[t][x]: source index of offset t - kHalf around y / x.
  std::vector<std::vector<Index>> rows(SrmKernelBank::kSize), cols(SrmKernelBank::kSize);
  for (Index t = 0; t < SrmKernelBank::kSize; ++t) {
    for (Index y = 0; y < h; ++y) rows[t].push_back(reflect(y + t - kHalf, h));
    for (Index c = 0; c < w; ++c) cols[t].push_back(reflect(c + t - kHalf, w));
  }
  struct Tap {
    Index di, dj;
    Scalar coef;
  };
  std::array<std::vector<Tap>, SrmKernelBank::kKernels> taps;
  std::array<Scalar, SrmKernelBank::kKernels> divisors{};
  for (int k = 0; k < SrmKernelBank::kKernels; ++k) {
    divisors[k] = static_cast<Scalar>(bank.divisors[k]);
    for (Index i = 0; i < SrmKernelBank::kSize; ++i)
      for (Index j = 0; j < SrmKernelBank::kSize; ++j) {
        const int coef = bank.kernels[k][i * SrmKernelBank::kSize + j];
        if (coef != 0 && !(i == kHalf && j == kHalf)) taps[k].push_back({i, j, static_cast<Scalar>(coef)});
      }
  }

  const Index out_channels = SrmKernelBank::kKernels * channels;
  Tensor<Scalar> out({batch, out_channels, h, w});
  const auto& xv = x.value();
  for (Index b = 0; b < batch; ++b)
    for (int k = 0; k < SrmKernelBank::kKernels; ++k)
      for (Index c = 0; c < channels; ++c) {
        const Scalar* xp = xv.data() + (b * channels + c) * plane;
        Scalar* yp = out.data() + (b * out_channels + k * channels + c) * plane;
        for (Index y = 0; y < h; ++y) {
          Scalar* yrow = yp + y * w;
          const Scalar* center = xp + y * w;
          for (const Tap& tap : taps[k]) {
            const Scalar* src = xp + rows[tap.di][y] * w;
            const Index* cj = cols[tap.dj].data();
            for (Index q = 0; q < w; ++q) yrow[q] += tap.coef * (src[cj[q]] - center[q]);
          }
          for (Index q = 0; q < w; ++q) yrow[q] /= divisors[k];
        }
      }

  return make_result(std::move(out), {x}, [=](const Node<Scalar>& self) {
    Tensor<Scalar>& dx = grad_slot(*self.parents[0]);
    std::vector<Scalar> scaled(static_cast<std::size_t>(w));
    for (Index b = 0; b < batch; ++b)
      for (int k = 0; k < SrmKernelBank::kKernels; ++k)
        for (Index c = 0; c < channels; ++c) {
          Scalar* dxp = dx.data() + (b * channels + c) * plane;
          const Scalar* dyp = self.grad.data() + (b * out_channels + k * channels + c) * plane;
          for (Index y = 0; y < h; ++y) {
            for (Index q = 0; q < w; ++q) scaled[q] = dyp[y * w + q] / divisors[k];
            Scalar* center = dxp + y * w;
            for (const Tap& tap : taps[k]) {
              Scalar* dst = dxp + rows[tap.di][y] * w;
              const Index* cj = cols[tap.dj].data();
              for (Index q = 0; q < w; ++q) {
                const Scalar g = tap.coef * scaled[q];
                dst[cj[q]] += g;
                center[q] -= g;
              }
            }
          }
        }
  });
}

/// X -> X_h: RGB image on the [0,255] scale to its 9-channel noise residual,
/// truncated to [-tau, tau] when the bank's threshold is positive.
template <typename Scalar>
Var<Scalar> srm_residual_image(const Var<Scalar>& image, const SrmKernelBank& bank) {
  require(image.rank() == 4 && image.dim(1) == 3,
          "srm_residual_image: expected an RGB tensor [B,3,H,W], got " + to_string(image.shape()));
  Var<Scalar> residual = srm_filter(image, bank);
  if (bank.clip_threshold > 0) {
    const auto tau = static_cast<Scalar>(bank.clip_threshold);
    residual = clamp(residual, -tau, tau);
  }
  return residual;
}

/// SRM residuals of a feature map followed by the learnable 1x1 convolution
/// that maps the 3C residual channels onto C' output channels.
template <typename Scalar>
Var<Scalar> srm_on_features(const Var<Scalar>& features, const SrmKernelBank& bank, const Var<Scalar>& align_weight,
                            const Var<Scalar>& align_bias) {
  require(features.rank() == 4, "srm_on_features: features must be rank 4");
  require(align_weight.rank() == 4 && align_weight.dim(1) == 3 * features.dim(1) && align_weight.dim(2) == 1 &&
              align_weight.dim(3) == 1,
          "srm_on_features: align weight " + to_string(align_weight.shape()) + " does not map " +
              std::to_string(3 * features.dim(1)) + " residual channels");
  return conv2d(srm_filter(features, bank), align_weight, align_bias);
}

}  // namespace hff
