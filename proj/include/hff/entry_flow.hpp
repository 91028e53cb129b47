#pragma once

#include <map>
#include <string>
#include <vector>

#include "hff/config.hpp"
#include "hff/params.hpp"
#include "hff/srm.hpp"

namespace hff {

/// Residual-guided spatial attention: one [1,2,k,k] convolution over the
/// stacked channel-max / channel-mean maps of X_h, followed by a sigmoid.
template <typename Scalar>
struct RsaParams {
  Var<Scalar> weight;
  Var<Scalar> bias;
};

template <typename Scalar>
struct EntryScaleParams {
  Var<Scalar> rgb_weight, rgb_bias;
  Var<Scalar> hf_weight, hf_bias;
  Var<Scalar> align_weight, align_bias;  // 1x1, 3*width -> width
};

template <typename Scalar>
struct EntryParams {
  std::vector<EntryScaleParams<Scalar>> scales;
  RsaParams<Scalar> rsa;
};

template <typename Scalar>
EntryParams<Scalar> make_entry_params(const EntryConfig& config, ParamStore<Scalar>& store, Rng& rng) {
  config.validate();
  EntryParams<Scalar> p;
  const bool rgb = config.streams != StreamMode::kSrmOnly;
  const bool hf = config.streams != StreamMode::kRgbOnly;
  int rgb_in = 3, hf_in = 3 * SrmKernelBank::kKernels;
  for (int s = 0; s < config.num_scales(); ++s) {
    const Index width = config.widths[static_cast<std::size_t>(s)];
    const std::string prefix = "entry.s" + std::to_string(s + 1);
    EntryScaleParams<Scalar> sp;
    if (rgb) {
      sp.rgb_weight = store.add(prefix + ".rgb.weight", he_normal({width, rgb_in, 3, 3}, rng));
      sp.rgb_bias = store.add(prefix + ".rgb.bias", zeros({width}));
    }
    if (hf) {
      sp.hf_weight = store.add(prefix + ".hf.weight", he_normal({width, hf_in, 3, 3}, rng));
      sp.hf_bias = store.add(prefix + ".hf.bias", zeros({width}));
    }
    if (rgb && hf && config.multiscale) {
      sp.align_weight = store.add(prefix + ".align.weight", he_normal({width, 3 * width, 1, 1}, rng));
      sp.align_bias = store.add(prefix + ".align.bias", zeros({width}));
    }
    p.scales.push_back(sp);
    rgb_in = hf_in = static_cast<int>(width);
  }
  if (rgb && hf && !config.rsa_scales.empty()) {
    const Index k = config.rsa_kernel;
    p.rsa.weight = store.add("entry.rsa.weight", he_normal({1, 2, k, k}, rng));
    p.rsa.bias = store.add("entry.rsa.bias", zeros({1}));
  }
  return p;
}

/// M = sigmoid(conv([channel_max(X_h); channel_avg(X_h)])), same spatial size as X_h.
template <typename Scalar>
Var<Scalar> rsa_map(const Var<Scalar>& residual, const RsaParams<Scalar>& params) {
  require(residual.rank() == 4, "rsa_map: residual must be rank 4");
  require(params.weight.defined() && params.weight.rank() == 4 && params.weight.dim(0) == 1 &&
              params.weight.dim(1) == 2,
          "rsa_map: weight must be [1,2,k,k]");
  ConvOptions opt;
  opt.pad = (params.weight.dim(2) - 1) / 2;
  const Var<Scalar> pooled = channel_concat<Scalar>({channel_max(residual), channel_avg(residual)});
  return sigmoid(conv2d(pooled, params.weight, params.bias, opt));
}

template <typename Scalar>
struct EntryOutput {
  Var<Scalar> features;     // F (undefined for the SRM-only stream mode)
  Var<Scalar> hf_features;  // F_h (undefined for the RGB-only stream mode)
  Var<Scalar> attention;    // M at full resolution, when RSA is active
  std::map<std::string, Var<Scalar>> intermediates;
};

/// f_entry: multi-scale RGB / high-frequency pyramid with SRM re-injection of
/// RGB features into the high-frequency carry and RSA gating of the RGB carry.
/// `forced_attention`, when given, replaces M (used to probe the gating).
template <typename Scalar>
EntryOutput<Scalar> entry_forward(const Var<Scalar>& image, const Var<Scalar>& residual,
                                  const EntryParams<Scalar>& params, const EntryConfig& config,
                                  const SrmKernelBank& bank, const Var<Scalar>* forced_attention = nullptr) {
  const bool rgb = config.streams != StreamMode::kSrmOnly;
  const bool hf = config.streams != StreamMode::kRgbOnly;
  const Index extent_div = Index{1} << config.num_scales();
  const Var<Scalar>& ref = rgb ? image : residual;
  require(ref.rank() == 4 && ref.dim(2) % extent_div == 0 && ref.dim(3) % extent_div == 0,
          "entry_forward: spatial extents of " + to_string(ref.shape()) + " not divisible by " +
              std::to_string(extent_div));
  if (rgb) require(image.dim(1) == 3, "entry_forward: image must have 3 channels");
  if (hf) require(residual.dim(1) == 3 * SrmKernelBank::kKernels, "entry_forward: residual must have 9 channels");
  if (rgb && hf) require(image.dim(2) == residual.dim(2) && image.dim(3) == residual.dim(3),
                         "entry_forward: image and residual sizes differ");
  require(static_cast<int>(params.scales.size()) == config.num_scales(), "entry_forward: parameter/config scale mismatch");

  EntryOutput<Scalar> out;
  ConvOptions same;
  same.pad = 1;
  const bool use_rsa = rgb && hf && !config.rsa_scales.empty();
  if (use_rsa) {
    out.attention = forced_attention ? *forced_attention : rsa_map(residual, params.rsa);
    out.intermediates["entry.rsa"] = out.attention;
  }

  Var<Scalar> rgb_carry = image, hf_carry = residual;
  for (int s = 0; s < config.num_scales(); ++s) {
    const auto& sp = params.scales[static_cast<std::size_t>(s)];
    const std::string prefix = "entry.s" + std::to_string(s + 1);
    Var<Scalar> f, fh;
    if (rgb) {
      f = relu(conv2d(rgb_carry, sp.rgb_weight, sp.rgb_bias, same));
      out.intermediates[prefix + ".rgb"] = f;
    }
    if (hf) {
      fh = relu(conv2d(hf_carry, sp.hf_weight, sp.hf_bias, same));
      out.intermediates[prefix + ".hf"] = fh;
    }
    if (rgb && hf && config.multiscale) {
      const Var<Scalar> injected = srm_on_features(f, bank, sp.align_weight, sp.align_bias);
      out.intermediates[prefix + ".srm"] = injected;
      fh = add(fh, injected);
      out.intermediates[prefix + ".hf_sum"] = fh;
    }
    const bool gate = use_rsa && std::find(config.rsa_scales.begin(), config.rsa_scales.end(), s + 1) !=
                                     config.rsa_scales.end();
    if (gate) {
      f = mul_spatial(f, downsample(out.attention, f.dim(2), f.dim(3)));
      out.intermediates[prefix + ".rgb_gated"] = f;
    }
    if (rgb) rgb_carry = maxpool2d(f);
    if (hf) hf_carry = maxpool2d(fh);
  }
  if (rgb) out.features = rgb_carry;
  if (hf) out.hf_features = hf_carry;
  return out;
}

}  // namespace hff
