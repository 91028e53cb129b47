#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hff/config.hpp"
#include "hff/dcma.hpp"
#include "hff/entry_flow.hpp"

namespace hff {

enum Label : int { kReal = 0, kFake = 1 };

template <typename Scalar>
struct FusionParams {
  Var<Scalar> squeeze_weight, squeeze_bias;  // [2C/r, 2C]
  Var<Scalar> excite_weight, excite_bias;    // [2C, 2C/r]
};

/// Squeeze-excite channel attention over the concatenated pooled stream
/// features: z = concat, gate = sigmoid(L2(relu(L1 z))), returns gate * z.
/// Each part is [B,C,1,1] (or [B,C]); the result is [B, sum C].
template <typename Scalar>
Var<Scalar> fuse(const std::vector<Var<Scalar>>& parts, const FusionParams<Scalar>& p) {
  require(!parts.empty(), "fuse: no stream features");
  std::vector<Var<Scalar>> flat;
  for (const auto& part : parts) {
    require((part.rank() == 4 && part.dim(2) == 1 && part.dim(3) == 1) || part.rank() == 2,
            "fuse: expected pooled features [B,C,1,1], got " + to_string(part.shape()));
    require(part.dim(1) == parts.front().dim(1) && part.dim(0) == parts.front().dim(0),
            "fuse: channel mismatch " + to_string(part.shape()) + " vs " + to_string(parts.front().shape()));
    flat.push_back(part.rank() == 2 ? part : reshape(part, {part.dim(0), part.dim(1)}));
  }
  const Var<Scalar> z = flat.size() == 1 ? flat.front() : channel_concat(flat);
  require(p.squeeze_weight.dim(1) == z.dim(1), "fuse: squeeze weight does not match fused width");
  const Var<Scalar> gate =
      sigmoid(linear(relu(linear(z, p.squeeze_weight, p.squeeze_bias)), p.excite_weight, p.excite_bias));
  return mul(gate, z);
}

/// Mean over the batch of -log(e^{s(cos_y - m)} / (e^{s(cos_y - m)} + e^{s cos_other})).
template <typename Scalar>
Var<Scalar> am_softmax_loss(const Var<Scalar>& cosines, std::span<const int> labels, double s, double m) {
  require(cosines.rank() == 2 && cosines.dim(1) == 2, "am_softmax_loss: cosines must be [B,2]");
  require(static_cast<Index>(labels.size()) == cosines.dim(0), "am_softmax_loss: one label per row required");
  require(s > 0, "am_softmax_loss: s must be positive");
  require(m >= 0 && m < 1, "am_softmax_loss: m must lie in [0,1)");
  const Index batch = cosines.dim(0);
  for (int y : labels) require(y == kReal || y == kFake, "am_softmax_loss: invalid label " + std::to_string(y));
  using Acc = std::conditional_t<(sizeof(Scalar) > sizeof(double)), Scalar, double>;
  const auto& c = cosines.value();
  std::vector<Scalar> p_true(static_cast<std::size_t>(batch));
  Acc total = 0;
  for (Index i = 0; i < batch; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const Acc zt = static_cast<Acc>(s) * (static_cast<Acc>(c[i * 2 + y]) - static_cast<Acc>(m));
    const Acc zo = static_cast<Acc>(s) * static_cast<Acc>(c[i * 2 + (1 - y)]);
    // -log(e^zt / (e^zt + e^zo)) = softplus(zo - zt), max-shifted.
    const Acc d = zo - zt;
    total += d > 0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
    p_true[static_cast<std::size_t>(i)] = static_cast<Scalar>(Acc(1) / (Acc(1) + std::exp(d)));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<Acc>(batch))), {cosines},
                     [=](const Node<Scalar>& self) {
                       Tensor<Scalar>& dc = grad_slot(*self.parents[0]);
                       const Scalar g = self.grad[0] * static_cast<Scalar>(s / static_cast<double>(batch));
                       for (Index i = 0; i < batch; ++i) {
                         const int y = ys[static_cast<std::size_t>(i)];
                         const Scalar pt = p_true[static_cast<std::size_t>(i)];
                         dc[i * 2 + y] += g * (pt - Scalar(1));
                         dc[i * 2 + (1 - y)] += g * (Scalar(1) - pt);
                       }
                     });
}

/// Mean of per-frame fake probabilities.
inline double video_level_predict(std::span<const double> frame_probs) {
  require(!frame_probs.empty(), "video_level_predict: no frames");
  double total = 0;
  for (double p : frame_probs) {
    require(p >= 0.0 && p <= 1.0, "video_level_predict: probabilities must lie in [0,1]");
    total += p;
  }
  return total / static_cast<double>(frame_probs.size());
}

template <typename Scalar>
struct ModelOutput {
  Var<Scalar> cosines;     // [B,2]: (real, fake)
  Tensor<Scalar> p_fake;   // [B]
  std::map<std::string, Var<Scalar>> activations;

  std::vector<std::string> activation_names() const {
    std::vector<std::string> names;
    for (const auto& [name, v] : activations) names.push_back(name);
    return names;
  }
};

/// Margin-free inference probability softmax(s * cos)[fake].
template <typename Scalar>
Tensor<Scalar> fake_probability(const Tensor<Scalar>& cosines, double s) {
  const Index batch = cosines.dim(0);
  Tensor<Scalar> p({batch});
  for (Index i = 0; i < batch; ++i) {
    const double d = s * (static_cast<double>(cosines[i * 2 + 0]) - static_cast<double>(cosines[i * 2 + 1]));
    // exp(s cos_f) / (exp(s cos_f) + exp(s cos_r)) = 1 / (1 + exp(s (cos_r - cos_f)))
    p[i] = static_cast<Scalar>(1.0 / (1.0 + std::exp(d)));
  }
  return p;
}

/// Two-stream detector: SRM residual extraction, entry flow, middle blocks
/// interleaved with DCMA, per-stream exit, channel-attention fusion and the
/// cosine classifier.
template <typename Scalar>
class TwoStreamModel {
 public:
  explicit TwoStreamModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    bank_.clip_threshold = config_.srm_clip;
    Rng rng(seed);
    entry_ = make_entry_params(config_.entry, store_, rng);
    const Index width = config_.final_width();
    const Index extent = config_.final_extent();
    for (int b = 0; b < config_.middle_blocks; ++b) {
      const std::string prefix = "middle.b" + std::to_string(b + 1);
      Block blk;
      if (has_rgb()) {
        blk.rgb_weight = store_.add(prefix + ".rgb.weight", he_normal({width, width, 3, 3}, rng));
        blk.rgb_bias = store_.add(prefix + ".rgb.bias", zeros({width}));
      }
      if (has_hf()) {
        blk.hf_weight = store_.add(prefix + ".hf.weight", he_normal({width, width, 3, 3}, rng));
        blk.hf_bias = store_.add(prefix + ".hf.bias", zeros({width}));
      }
      middle_.push_back(blk);
    }
    if (config_.two_stream()) {
      std::vector<int> placements = config_.dcma_placements;
      std::sort(placements.begin(), placements.end());
      for (int p : placements) {
        dcma_.emplace_back(p, make_dcma_params("dcma.p" + std::to_string(p), width, extent,
                                               config_.dcma_reduction, store_, rng));
      }
    }
    const Index exit = config_.exit_width;
    if (has_rgb()) {
      exit_rgb_weight_ = store_.add("exit.rgb.weight", he_normal({exit, width, 3, 3}, rng));
      exit_rgb_bias_ = store_.add("exit.rgb.bias", zeros({exit}));
    }
    if (has_hf()) {
      exit_hf_weight_ = store_.add("exit.hf.weight", he_normal({exit, width, 3, 3}, rng));
      exit_hf_bias_ = store_.add("exit.hf.bias", zeros({exit}));
    }
    const Index fused = embedding_dim();
    const Index squeezed = fused / config_.fusion_reduction;
    fusion_.squeeze_weight = store_.add("fusion.squeeze.weight", he_normal({squeezed, fused}, rng));
    fusion_.squeeze_bias = store_.add("fusion.squeeze.bias", zeros({squeezed}));
    fusion_.excite_weight = store_.add("fusion.excite.weight", he_normal({fused, squeezed}, rng));
    fusion_.excite_bias = store_.add("fusion.excite.bias", zeros({fused}));
    classifier_ = store_.add("classifier.anchors", normal_tensor({2, fused}, 1.0, rng));
  }

  // Copies would alias parameter nodes.
  TwoStreamModel(const TwoStreamModel&) = delete;
  TwoStreamModel& operator=(const TwoStreamModel&) = delete;
  TwoStreamModel(TwoStreamModel&&) noexcept = default;
  TwoStreamModel& operator=(TwoStreamModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const SrmKernelBank& bank() const { return bank_; }
  ParamStore<Scalar>& store() { return store_; }
  const ParamStore<Scalar>& store() const { return store_; }
  std::vector<NamedParam<Scalar>>& params() { return store_.params(); }
  const EntryParams<Scalar>& entry_params() const { return entry_; }
  Index embedding_dim() const { return config_.two_stream() ? 2 * config_.exit_width : config_.exit_width; }

  /// `images` holds RGB pixels on the [0,255] scale, [B,3,S,S].
  ModelOutput<Scalar> forward(const Tensor<Scalar>& images) const {
    const Index size = config_.input_size;
    require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == size && images.dim(3) == size,
            "forward: expected input [B,3," + std::to_string(size) + "," + std::to_string(size) + "], got " +
                to_string(images.shape()));
    ModelOutput<Scalar> out;
    const Var<Scalar> x(images, false);
    Var<Scalar> residual;
    if (has_hf()) {
      residual = srm_residual_image(x, bank_);
      out.activations["srm.residual"] = residual;
    }
    const Var<Scalar> normalized = affine(x, Scalar(1) / Scalar(127.5), Scalar(-1));
    EntryOutput<Scalar> entry = entry_forward(normalized, residual, entry_, config_.entry, bank_);
    for (auto& [name, v] : entry.intermediates) out.activations[name] = v;

    Var<Scalar> rgb = entry.features, hf = entry.hf_features;
    ConvOptions same;
    same.pad = 1;
    for (int b = 0; b <= config_.middle_blocks; ++b) {
      for (const auto& [placement, params] : dcma_) {
        if (placement != b) continue;
        DcmaOutput<Scalar> d = dcma_forward(rgb, hf, params);
        rgb = d.rgb;
        hf = d.hf;
        const std::string prefix = "dcma.p" + std::to_string(placement);
        out.activations[prefix + ".rgb"] = rgb;
        out.activations[prefix + ".hf"] = hf;
        out.activations[prefix + ".attention"] = d.attention;
        out.activations[prefix + ".hf_attention"] = d.hf_attention;
      }
      if (b == config_.middle_blocks) break;
      const Block& blk = middle_[static_cast<std::size_t>(b)];
      const std::string prefix = "middle.b" + std::to_string(b + 1);
      if (has_rgb()) {
        rgb = add(rgb, relu(conv2d(rgb, blk.rgb_weight, blk.rgb_bias, same)));
        out.activations[prefix + ".rgb"] = rgb;
      }
      if (has_hf()) {
        hf = add(hf, relu(conv2d(hf, blk.hf_weight, blk.hf_bias, same)));
        out.activations[prefix + ".hf"] = hf;
      }
    }
    std::vector<Var<Scalar>> pooled;
    if (has_rgb()) {
      const Var<Scalar> e = relu(conv2d(rgb, exit_rgb_weight_, exit_rgb_bias_, same));
      out.activations["exit.rgb"] = e;
      pooled.push_back(global_avgpool(e));
    }
    if (has_hf()) {
      const Var<Scalar> e = relu(conv2d(hf, exit_hf_weight_, exit_hf_bias_, same));
      out.activations["exit.hf"] = e;
      pooled.push_back(global_avgpool(e));
    }
    const Var<Scalar> fused = fuse(pooled, fusion_);
    out.activations["fusion"] = fused;
    const Var<Scalar> embedding = l2_normalize_rows(fused);
    const Var<Scalar> anchors = l2_normalize_rows(classifier_);
    out.cosines = matmul(embedding, anchors, Transpose::kNo, Transpose::kYes);
    out.p_fake = fake_probability(out.cosines.value(), config_.loss_s);
    return out;
  }

  Var<Scalar> loss(const ModelOutput<Scalar>& out, std::span<const int> labels) const {
    return am_softmax_loss(out.cosines, labels, config_.loss_s, config_.loss_m);
  }

 private:
  struct Block {
    Var<Scalar> rgb_weight, rgb_bias, hf_weight, hf_bias;
  };

  bool has_rgb() const { return config_.entry.streams != StreamMode::kSrmOnly; }
  bool has_hf() const { return config_.entry.streams != StreamMode::kRgbOnly; }

  ModelConfig config_;
  SrmKernelBank bank_;
  ParamStore<Scalar> store_;
  EntryParams<Scalar> entry_;
  std::vector<Block> middle_;
  std::vector<std::pair<int, DcmaParams<Scalar>>> dcma_;
  Var<Scalar> exit_rgb_weight_, exit_rgb_bias_, exit_hf_weight_, exit_hf_bias_;
  FusionParams<Scalar> fusion_;
  Var<Scalar> classifier_;
};

}  // namespace hff
