#include "hff/gradcheck_suite.hpp"

#include <algorithm>
#include <memory>

#include "hff/forgery.hpp"
#include "hff/grad_check.hpp"
#include "hff/model.hpp"

namespace hff {

namespace {

using Vars = std::vector<Var<double>>;
using Op = std::function<Var<double>(const Vars&)>;

Tensor<double> uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values with magnitude in [lo, hi] and random sign, kept clear of kinks at 0.
Tensor<double> signed_away(const Shape& shape, Rng& rng, double lo = 0.2, double hi = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return t;
}

Index pick(Rng& rng, Index lo, Index hi) { return static_cast<Index>(rng.uniform_int(static_cast<int>(lo), static_cast<int>(hi))); }

// Reduces the op's output with fixed random weights so no gradient cancels by
// symmetry. Weights are drawn in 64-bit, so every precision sees equal values.
template <typename Scalar = double>
std::function<Var<Scalar>(const Var<Scalar>&)> weigher(std::uint64_t seed) {
  auto weights = std::make_shared<Tensor<Scalar>>();
  auto rng = std::make_shared<Rng>(mix_seed(seed, 0x5eed));
  return [weights, rng](const Var<Scalar>& out) {
    if (weights->empty() || weights->shape() != out.shape())
      *weights = signed_away(out.shape(), *rng, 0.5, 1.5).template cast<Scalar>();
    return weighted_sum(out, *weights);
  };
}

template <typename Scalar>
struct Probe {
  std::vector<Var<Scalar>> leaves;
  std::function<Var<Scalar>()> f;
};

// Composite computations: analytic 64-bit gradients against central
// differences of a long double twin built from the same seed.
template <typename Build>
double check_twin(std::uint64_t seed, Build&& build, std::optional<Index> max_coords = std::nullopt,
                  int refinements = 0) {
  Probe<double> narrow = build(double{});
  Probe<long double> wide = build(static_cast<long double>(0));
  auto reduce = weigher<double>(seed);
  auto reduce_wide = weigher<long double>(seed);
  GradCheckOptions opt;
  opt.eps = 1e-6;
  opt.max_coords = max_coords;
  opt.refinements = refinements;
  opt.coord_seed = seed;
  return grad_check_twin<long double>([&] { return reduce(narrow.f()); }, narrow.leaves,
                                      [&] { return reduce_wide(wide.f()); }, wide.leaves, opt);
}

double check_op(std::uint64_t seed, const std::vector<Tensor<double>>& inputs, const Op& op, double eps) {
  auto reduce = weigher(seed);
  GradCheckOptions opt;
  opt.eps = eps;
  return grad_check([&](const Vars& v) { return reduce(op(v)); }, inputs, opt);
}

// Linear and bilinear ops have exact central differences, so a wide step
// keeps round-off negligible.
constexpr double kLinearEps = 1e-2;
constexpr double kSmoothEps = 1e-5;

ConvOptions conv_options(Rng& rng, bool allow_stride) {
  ConvOptions opt;
  opt.pad = pick(rng, 0, 2);
  opt.stride = allow_stride ? pick(rng, 1, 2) : 1;
  return opt;
}

std::vector<GradCheckCase> build_cases() {
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, double tol, std::function<double(std::uint64_t)> run) {
    cases.push_back({std::move(name), tol, std::move(run)});
  };

  add_case("conv2d", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index b = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 4), k = 2 * pick(rng, 0, 2) + 1;
    ConvOptions opt = conv_options(rng, true);
    Index h = pick(rng, k, k + 4);
    // Keep the output extent integral under the chosen stride.
    while ((h + 2 * opt.pad - k) % opt.stride != 0) ++h;
    return check_op(seed, {uniform({b, cin, h, h}, rng), uniform({cout, cin, k, k}, rng), uniform({cout}, rng)},
                    [opt](const Vars& v) { return conv2d(v[0], v[1], v[2], opt); }, kLinearEps);
  });
  add_case("conv2d.depthwise", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index b = pick(rng, 1, 2), cin = pick(rng, 1, 3), groups = pick(rng, 1, 3), k = 2 * pick(rng, 0, 2) + 1;
    ConvOptions opt = conv_options(rng, false);
    opt.depthwise = true;
    const Index h = pick(rng, k, k + 3);
    return check_op(seed,
                    {uniform({b, cin, h, h + 1}, rng), uniform({groups, 1, k, k}, rng), uniform({groups * cin}, rng)},
                    [opt](const Vars& v) { return conv2d(v[0], v[1], v[2], opt); }, kLinearEps);
  });
  add_case("conv2d.pointwise", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index b = pick(rng, 1, 2), cin = pick(rng, 1, 6), cout = pick(rng, 1, 4), h = pick(rng, 1, 5);
    return check_op(seed, {uniform({b, cin, h, h}, rng), uniform({cout, cin, 1, 1}, rng)},
                    [](const Vars& v) { return conv2d(v[0], v[1]); }, kLinearEps);
  });
  add_case("pad2d", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index h = pick(rng, 3, 6), pad = pick(rng, 0, 2);
    const PadMode mode = rng.below(2) ? PadMode::kReflect : PadMode::kZeros;
    return check_op(seed, {uniform({2, 2, h, h + 1}, rng)}, [=](const Vars& v) { return pad2d(v[0], pad, mode); },
                    kLinearEps);
  });
  add_case("matmul", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index m = pick(rng, 1, 5), k = pick(rng, 1, 6), n = pick(rng, 1, 5);
    const Transpose ta = rng.below(2) ? Transpose::kYes : Transpose::kNo;
    const Transpose tb = rng.below(2) ? Transpose::kYes : Transpose::kNo;
    const bool batched = rng.below(2) == 1;
    auto shape = [&](Index r, Index c, Transpose t) {
      Shape s = t == Transpose::kYes ? Shape{c, r} : Shape{r, c};
      if (batched) s.insert(s.begin(), 3);
      return s;
    };
    return check_op(seed, {uniform(shape(m, k, ta), rng), uniform(shape(k, n, tb), rng)},
                    [=](const Vars& v) { return matmul(v[0], v[1], ta, tb); }, kLinearEps);
  });
  add_case("transpose_last2", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {uniform({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)},
                    [](const Vars& v) { return transpose_last2(v[0]); }, kLinearEps);
  });
  add_case("softmax", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Shape shape{pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 1, 4)};
    const Index axis = pick(rng, 0, 2);
    return check_op(seed, {uniform(shape, rng, -2, 2)}, [axis](const Vars& v) { return softmax(v[0], axis); },
                    kSmoothEps);
  });
  add_case("sigmoid", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {uniform({pick(rng, 1, 4), pick(rng, 1, 5)}, rng, -3, 3)},
                    [](const Vars& v) { return sigmoid(v[0]); }, kSmoothEps);
  });
  add_case("relu", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {signed_away({pick(rng, 1, 4), pick(rng, 1, 5)}, rng)},
                    [](const Vars& v) { return relu(v[0]); }, kLinearEps);
  });
  add_case("add.sub.mul", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Shape shape{pick(rng, 1, 3), pick(rng, 1, 4)};
    return check_op(seed, {uniform(shape, rng), uniform(shape, rng), uniform(shape, rng)},
                    [](const Vars& v) { return mul(sub(add(v[0], v[1]), v[2]), v[1]); }, kLinearEps);
  });
  add_case("affine.clamp", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const double a = rng.uniform(-2, 2), c = rng.uniform(-1, 1);
    // Inputs land at least 0.1 away from the clamp bounds after the affine map.
    Tensor<double> x = signed_away({2, pick(rng, 1, 6)}, rng, 0.1, 0.9);
    for (Index i = 0; i < x.size(); ++i) {
      if (rng.below(2)) x[i] += x[i] > 0 ? 1.0 : -1.0;
      x[i] = (x[i] - c) / a;
    }
    return check_op(seed, {x}, [=](const Vars& v) { return clamp(affine(v[0], a, c), -1.0, 1.0); }, 1e-4);
  });
  add_case("divide_channels.mul_spatial", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index c = pick(rng, 1, 4), h = pick(rng, 1, 4);
    std::vector<double> div;
    for (Index i = 0; i < c; ++i) div.push_back(rng.uniform(1, 12));
    return check_op(seed, {uniform({2, c, h, h}, rng), uniform({2, 1, h, h}, rng)},
                    [div](const Vars& v) { return mul_spatial(divide_channels(v[0], div), v[1]); }, kLinearEps);
  });
  add_case("channel_concat.reshape", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index h = pick(rng, 1, 3);
    return check_op(seed, {uniform({2, pick(rng, 1, 3), h, h}, rng), uniform({2, pick(rng, 1, 3), h, h}, rng)},
                    [](const Vars& v) {
                      const Var<double> cat = channel_concat<double>({v[0], v[1]});
                      return reshape(cat, {cat.dim(0), cat.value().size() / cat.dim(0)});
                    },
                    kLinearEps);
  });
  add_case("flatten.unflatten", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    return check_op(seed, {uniform({2, 3, h, w}, rng)},
                    [=](const Vars& v) { return unflatten(affine(flatten(v[0]), 2.0), h, w); }, kLinearEps);
  });
  add_case("maxpool2d", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index h = 2 * pick(rng, 1, 3);
    return check_op(seed, {uniform({2, 2, h, h + 2}, rng)}, [](const Vars& v) { return maxpool2d(v[0]); }, 1e-4);
  });
  add_case("avgpool2d.downsample", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index f = pick(rng, 1, 3), h = f * pick(rng, 1, 3);
    return check_op(seed, {uniform({2, 2, h, h}, rng)},
                    [=](const Vars& v) { return downsample(avgpool2d(v[0], f), 1, 1); }, kLinearEps);
  });
  add_case("global_avgpool", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {uniform({2, pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)},
                    [](const Vars& v) { return global_avgpool(v[0]); }, kLinearEps);
  });
  add_case("channel_max.channel_avg", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {uniform({2, pick(rng, 1, 5), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)},
                    [](const Vars& v) { return channel_concat<double>({channel_max(v[0]), channel_avg(v[0])}); },
                    1e-4);
  });
  add_case("linear", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index n = pick(rng, 1, 4), in = pick(rng, 1, 6), out = pick(rng, 1, 5);
    return check_op(seed, {uniform({n, in}, rng), uniform({out, in}, rng), uniform({out}, rng)},
                    [](const Vars& v) { return linear(v[0], v[1], v[2]); }, kLinearEps);
  });
  add_case("l2_normalize_rows", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    return check_op(seed, {signed_away({pick(rng, 1, 4), pick(rng, 2, 6)}, rng, 0.3, 1.0)},
                    [](const Vars& v) { return l2_normalize_rows(v[0]); }, kSmoothEps);
  });
  add_case("sum.mean.take_column", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index cols = pick(rng, 2, 5);
    const Index j = pick(rng, 0, cols - 1);
    return check_op(seed, {uniform({3, cols}, rng)},
                    [j](const Vars& v) {
                      return channel_concat<double>(
                          {reshape(sum(v[0]), {1, 1}), reshape(mean(v[0]), {1, 1}),
                           reshape(take_column(v[0], j), {1, 3})});
                    },
                    kLinearEps);
  });
  add_case("srm_filter", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index h = pick(rng, 3, 7), w = pick(rng, 3, 7);
    SrmKernelBank bank;
    return check_op(seed, {uniform({pick(rng, 1, 2), pick(rng, 1, 3), h, w}, rng)},
                    [bank](const Vars& v) { return srm_filter(v[0], bank); }, kLinearEps);
  });
  add_case("srm_residual_image", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    SrmKernelBank bank;
    const Index h = pick(rng, 4, 8);
    // Mix of in-range and saturated residuals, none within 1e-3 of the bound.
    Tensor<double> x = uniform({1, 3, h, h}, rng, 100, 103);
    return check_op(seed, {x}, [bank](const Vars& v) { return srm_residual_image(v[0], bank); }, 1e-4);
  });
  add_case("srm_on_features", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    SrmKernelBank bank;
    const Index c = pick(rng, 1, 3), out = pick(rng, 1, 3), h = pick(rng, 3, 6);
    return check_op(seed, {uniform({2, c, h, h}, rng), uniform({out, 3 * c, 1, 1}, rng), uniform({out}, rng)},
                    [bank](const Vars& v) { return srm_on_features(v[0], bank, v[1], v[2]); }, kLinearEps);
  });
  add_case("rsa_map", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index k = 2 * pick(rng, 1, 2) + 1, h = pick(rng, 3, 6);
    return check_op(seed, {uniform({2, 9, h, h}, rng, -2, 2), uniform({1, 2, k, k}, rng), uniform({1}, rng)},
                    [](const Vars& v) { return rsa_map(v[0], RsaParams<double>{v[1], v[2]}); }, 1e-4);
  });
  add_case("correlation", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Shape shape{2, pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
    return check_op(seed, {uniform(shape, rng), uniform(shape, rng)},
                    [](const Vars& v) { return correlation(v[0], v[1]); }, kLinearEps);
  });
  add_case("entry_forward", 1e-6, [](std::uint64_t seed) {
    return check_twin(seed, [seed]<typename S>(S) {
      Rng rng(seed);
      EntryConfig config;
      config.widths = {3, 4};
      config.rsa_scales = {1 + static_cast<int>(rng.below(2))};
      config.rsa_kernel = 3;
      auto store = std::make_shared<ParamStore<S>>();
      const EntryParams<S> params = make_entry_params(config, *store, rng);
      Probe<S> probe;
      probe.leaves = {Var<S>(uniform({1, 3, 8, 8}, rng).cast<S>(), true),
                      Var<S>(uniform({1, 9, 8, 8}, rng, -2, 2).cast<S>(), true)};
      for (const auto& p : store->params()) probe.leaves.push_back(p.var);
      probe.f = [store, params, config, rgb = probe.leaves[0], hf = probe.leaves[1]] {
        const EntryOutput<S> out = entry_forward(rgb, hf, params, config, SrmKernelBank{});
        return channel_concat<S>({out.features, out.hf_features});
      };
      return probe;
    });
  });
  add_case("dcma_forward", 1e-6, [](std::uint64_t seed) {
    return check_twin(seed, [seed]<typename S>(S) {
      Rng rng(seed);
      auto store = std::make_shared<ParamStore<S>>();
      const Index c = 4, extent = 2;
      DcmaParams<S> params = make_dcma_params("dcma", c, extent, pick(rng, 1, 2) * 2, *store, rng);
      // Larger mixing weights make the attention non-trivial.
      params.mix.mutable_value() = uniform({4, 4}, rng).cast<S>();
      params.hf_mix.mutable_value() = uniform({4, 4}, rng).cast<S>();
      Probe<S> probe;
      probe.leaves = {Var<S>(uniform({2, c, extent, extent}, rng).cast<S>(), true),
                      Var<S>(uniform({2, c, extent, extent}, rng).cast<S>(), true)};
      for (const auto& p : store->params()) probe.leaves.push_back(p.var);
      probe.f = [store, params, rgb = probe.leaves[0], hf = probe.leaves[1]] {
        const DcmaOutput<S> out = dcma_forward(rgb, hf, params);
        return channel_concat<S>({out.rgb, out.hf});
      };
      return probe;
    });
  });
  add_case("fuse", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index c = 4 * pick(rng, 1, 2);
    return check_op(seed,
                    {uniform({3, c, 1, 1}, rng), uniform({3, c, 1, 1}, rng), signed_away({c / 2, 2 * c}, rng),
                     uniform({c / 2}, rng, 0.5, 1.0), uniform({2 * c, c / 2}, rng), uniform({2 * c}, rng)},
                    [](const Vars& v) {
                      return fuse<double>({v[0], v[1]}, FusionParams<double>{v[2], v[3], v[4], v[5]});
                    },
                    kSmoothEps);
  });
  add_case("am_softmax_loss", 1e-6, [](std::uint64_t seed) {
    Rng rng(seed);
    const Index batch = pick(rng, 1, 6);
    std::vector<int> labels;
    for (Index i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng.below(2)));
    const double s = rng.uniform(1, 8), m = rng.uniform(0, 0.5);
    return check_op(seed, {uniform({batch, 2}, rng, -0.9, 0.9)},
                    [=](const Vars& v) { return am_softmax_loss(v[0], labels, s, m); }, kSmoothEps);
  });
  // Probed on the weighted class cosines: the scaled margin loss saturates and
  // leaves gradient components below what central differences can resolve.
  add_case("full_model", 1e-5, [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 17));
    Tensor<double> x({2, 3, 16, 16});
    for (Index b = 0; b < 2; ++b) {
      const Image8 image = gen_base_image(rng.next_u64(), 32, rng.uniform(1.0, 3.0));
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < 16; ++y)
          for (Index xx = 0; xx < 16; ++xx)
            x.at(b, c, y, xx) = image.at(static_cast<int>(y), static_cast<int>(xx), static_cast<int>(c));
    }
    return check_twin(
        seed,
        [seed, &x]<typename S>(S) {
          ModelConfig config;
          config.input_size = 16;
          config.entry.widths = {4, 8, 8};
          config.entry.rsa_kernel = 3;
          config.exit_width = 8;
          auto model = std::make_shared<TwoStreamModel<S>>(config, seed);
          // Zero biases put dead-input positions exactly on the next ReLU kink.
          Rng bias_rng(mix_seed(seed, 29));
          for (auto& p : model->params())
            if (p.name.ends_with(".bias")) p.var.mutable_value() = uniform(p.var.shape(), bias_rng, -0.2, 0.2).template cast<S>();
          Probe<S> probe;
          for (const auto& p : model->params()) probe.leaves.push_back(p.var);
          probe.f = [model, input = x.cast<S>()] { return model->forward(input).cosines; };
          return probe;
        },
        8, 2);
  });
  return cases;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_cases() { return build_cases(); }

std::vector<GradCheckOutcome> run_gradcheck_suite(int seeds, const std::function<void(const GradCheckOutcome&)>& report) {
  std::vector<GradCheckOutcome> outcomes;
  for (const auto& c : gradcheck_cases()) {
    GradCheckOutcome o;
    o.name = c.name;
    o.tolerance = c.tolerance;
    o.seeds = seeds;
    for (int s = 1; s <= seeds; ++s) o.worst = std::max(o.worst, c.run(mix_seed(stable_hash(c.name), static_cast<std::uint64_t>(s))));
    o.passed = o.worst <= c.tolerance;
    if (report) report(o);
    outcomes.push_back(o);
  }
  return outcomes;
}

}  // namespace hff
