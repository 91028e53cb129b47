#pragma once

#include <string>

#include "hff/params.hpp"
#include "hff/ops.hpp"

namespace hff {

template <typename Scalar>
struct DcmaParams {
  Var<Scalar> value_weight, value_bias;        // RGB values, C -> C
  Var<Scalar> hf_value_weight, hf_value_bias;  // high-frequency values, C -> C
  Var<Scalar> key_weight, key_bias;            // RGB key first layer, C -> C/r
  Var<Scalar> hf_key_weight, hf_key_bias;      // high-frequency key first layer
  Var<Scalar> shared_key_weight, shared_key_bias;  // second key layer, shared
  Var<Scalar> mix, hf_mix;                     // W, W_h: [HW,HW]
};

template <typename Scalar>
DcmaParams<Scalar> make_dcma_params(const std::string& prefix, Index channels, Index extent, Index reduction,
                                    ParamStore<Scalar>& store, Rng& rng) {
  require(reduction > 0 && channels % reduction == 0,
          "dcma: reduction " + std::to_string(reduction) + " must divide " + std::to_string(channels) + " channels");
  const Index kc = channels / reduction, hw = extent * extent;
  DcmaParams<Scalar> p;
  p.value_weight = store.add(prefix + ".value.weight", he_normal({channels, channels, 3, 3}, rng));
  p.value_bias = store.add(prefix + ".value.bias", zeros({channels}));
  p.hf_value_weight = store.add(prefix + ".hf_value.weight", he_normal({channels, channels, 3, 3}, rng));
  p.hf_value_bias = store.add(prefix + ".hf_value.bias", zeros({channels}));
  p.key_weight = store.add(prefix + ".key.weight", he_normal({kc, channels, 3, 3}, rng));
  p.key_bias = store.add(prefix + ".key.bias", zeros({kc}));
  p.hf_key_weight = store.add(prefix + ".hf_key.weight", he_normal({kc, channels, 3, 3}, rng));
  p.hf_key_bias = store.add(prefix + ".hf_key.bias", zeros({kc}));
  p.shared_key_weight = store.add(prefix + ".shared_key.weight", he_normal({kc, kc, 3, 3}, rng));
  p.shared_key_bias = store.add(prefix + ".shared_key.bias", zeros({kc}));
  p.mix = store.add(prefix + ".mix", normal_tensor({hw, hw}, 0.01, rng));
  p.hf_mix = store.add(prefix + ".hf_mix", normal_tensor({hw, hw}, 0.01, rng));
  return p;
}

/// C = flt(K)^T flt(K_h). Accepts single samples [C/r,H,W] -> [HW,HW] or
/// batches [B,C/r,H,W] -> [B,HW,HW].
template <typename Scalar>
Var<Scalar> correlation(const Var<Scalar>& key, const Var<Scalar>& hf_key) {
  require(key.shape() == hf_key.shape() && (key.rank() == 3 || key.rank() == 4),
          "correlation: key shapes " + to_string(key.shape()) + " and " + to_string(hf_key.shape()) + " differ");
  return matmul(flatten(key), flatten(hf_key), Transpose::kYes, Transpose::kNo);
}

template <typename Scalar>
struct DcmaOutput {
  Var<Scalar> rgb;       // T'
  Var<Scalar> hf;        // T_h'
  Var<Scalar> attention;     // A  [B,HW,HW], columns sum to one
  Var<Scalar> hf_attention;  // A_h
};

/// f_DCMA. Per sample: A = softmax(C W) and A_h = softmax(C^T W_h), each
/// normalized down its columns; R = flt(V_h) A, R_h = flt(V) A_h;
/// T' = T + R, T_h' = T_h + R_h.
template <typename Scalar>
DcmaOutput<Scalar> dcma_forward(const Var<Scalar>& rgb, const Var<Scalar>& hf, const DcmaParams<Scalar>& p) {
  require(rgb.rank() == 4 && rgb.shape() == hf.shape(),
          "dcma_forward: stream shapes " + to_string(rgb.shape()) + " and " + to_string(hf.shape()) + " differ");
  const Index batch = rgb.dim(0), h = rgb.dim(2), w = rgb.dim(3), hw = h * w;
  require(p.mix.rank() == 2 && p.mix.dim(0) == hw && p.mix.dim(1) == hw && p.hf_mix.shape() == p.mix.shape(),
          "dcma_forward: mixing matrix " + to_string(p.mix.shape()) + " does not match " + std::to_string(hw) +
              " positions");
  ConvOptions same;
  same.pad = 1;
  const Var<Scalar> value = conv2d(rgb, p.value_weight, p.value_bias, same);
  const Var<Scalar> hf_value = conv2d(hf, p.hf_value_weight, p.hf_value_bias, same);
  const Var<Scalar> key =
      conv2d(relu(conv2d(rgb, p.key_weight, p.key_bias, same)), p.shared_key_weight, p.shared_key_bias, same);
  const Var<Scalar> hf_key =
      conv2d(relu(conv2d(hf, p.hf_key_weight, p.hf_key_bias, same)), p.shared_key_weight, p.shared_key_bias, same);

  const Var<Scalar> corr = correlation(key, hf_key);  // [B,HW,HW]
  auto attend = [&](const Var<Scalar>& c, const Var<Scalar>& mix) {
    const Var<Scalar> logits = reshape(matmul(reshape(c, {batch * hw, hw}), mix), {batch, hw, hw});
    return softmax(logits, 1);
  };
  DcmaOutput<Scalar> out;
  out.attention = attend(corr, p.mix);
  out.hf_attention = attend(transpose_last2(corr), p.hf_mix);
  const Var<Scalar> refined = matmul(flatten(hf_value), out.attention);
  const Var<Scalar> hf_refined = matmul(flatten(value), out.hf_attention);
  out.rgb = add(rgb, unflatten(refined, h, w));
  out.hf = add(hf, unflatten(hf_refined, h, w));
  return out;
}

}  // namespace hff
