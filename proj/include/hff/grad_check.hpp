#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "hff/autograd.hpp"
#include "hff/random.hpp"

namespace hff {

using GradClosure = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckOptions {
  double eps = 1e-6;
  // When set, only this many randomly chosen coordinates per input are probed.
  std::optional<Index> max_coords;
  std::uint64_t coord_seed = 0;
  // A probe whose forward and backward one-sided differences disagree by more
  // than `kink_tolerance` (relative) straddles a non-differentiable point; it
  // is repeated with the step divided by 10, at most `refinements` times.
  int refinements = 0;
  double kink_tolerance = 1e-3;
};

namespace detail {

// Worst relative error of `analytic` against central differences computed by
// `perturbed(k, i, delta)`, which evaluates the closure with coordinate i of
// leaf k shifted by delta.
template <typename Perturbed>
double compare_central(const std::vector<Tensor<double>>& analytic, Perturbed&& perturbed,
                       const GradCheckOptions& opt) {
  using Value = decltype(perturbed(std::size_t{0}, Index{0}, 0.0));
  Rng rng(opt.coord_seed);
  std::optional<Value> centre;
  double worst = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const Index n = analytic[k].size();
    std::vector<Index> coords(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    if (opt.max_coords && *opt.max_coords < n) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(static_cast<std::size_t>(*opt.max_coords));
    }
    for (Index i : coords) {
      double step = opt.eps;
      double numeric = 0.0;
      for (int attempt = 0;; ++attempt) {
        const auto up = perturbed(k, i, step);
        const auto down = perturbed(k, i, -step);
        numeric = static_cast<double>((up - down) / (Value(2) * static_cast<Value>(step)));
        if (attempt == opt.refinements) break;
        if (!centre) centre = perturbed(k, i, 0.0);
        const double forward = static_cast<double>((up - *centre) / static_cast<Value>(step));
        const double backward = static_cast<double>((*centre - down) / static_cast<Value>(step));
        const double scale = std::max({std::abs(forward), std::abs(backward), 1e-8});
        if (std::abs(forward - backward) <= opt.kink_tolerance * scale) break;
        step /= 10.0;
      }
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline std::vector<Tensor<double>> analytic_gradients(const std::function<Var<double>()>& f,
                                                      std::vector<Var<double>>& leaves) {
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    const Var<double> out = f();
    require(out.value().size() == 1, "grad_check: closure must return a scalar");
    backward(out);
  }
  std::vector<Tensor<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad() : Tensor<double>(leaf.shape()));
    leaf.zero_grad();
  }
  return analytic;
}

}  // namespace detail

/// Gradient check over existing leaf variables (for example a model's
/// parameters): `f` rebuilds the scalar from the current leaf values. Leaves
/// are perturbed in place and restored.
inline double grad_check_leaves(const std::function<Var<double>()>& f, std::vector<Var<double>> leaves,
                                const GradCheckOptions& opt = {}) {
  const auto analytic = detail::analytic_gradients(f, leaves);
  return detail::compare_central(
      analytic,
      [&](std::size_t k, Index i, double delta) {
        double& slot = leaves[k].mutable_value()[i];
        const double original = slot;
        slot = original + delta;
        double value;
        {
          NoGradGuard guard;
          value = f().value()[0];
        }
        slot = original;
        return value;
      },
      opt);
}

/// Reverse-mode gradients of the 64-bit closure `f` against central
/// differences of `f_wide`, the same computation at wider precision over
/// leaves holding the same values. The wider oracle keeps round-off in the
/// difference quotient far below the gradient components being checked.
template <typename Wide>
double grad_check_twin(const std::function<Var<double>()>& f, std::vector<Var<double>> leaves,
                       const std::function<Var<Wide>()>& f_wide, std::vector<Var<Wide>> wide_leaves,
                       const GradCheckOptions& opt = {}) {
  require(leaves.size() == wide_leaves.size(), "grad_check_twin: leaf lists differ in length");
  for (std::size_t k = 0; k < leaves.size(); ++k)
    require(leaves[k].shape() == wide_leaves[k].shape(), "grad_check_twin: leaf shapes differ");
  const auto analytic = detail::analytic_gradients(f, leaves);
  return detail::compare_central(
      analytic,
      [&](std::size_t k, Index i, double delta) {
        Wide& slot = wide_leaves[k].mutable_value()[i];
        const Wide original = slot;
        slot = original + static_cast<Wide>(delta);
        Wide value;
        {
          NoGradGuard guard;
          value = f_wide().value()[0];
        }
        slot = original;
        return value;
      },
      opt);
}

/// Largest componentwise relative error between the reverse-mode gradient of
/// `f` and central differences, with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const GradClosure& f, const std::vector<Tensor<double>>& inputs,
                         const GradCheckOptions& opt = {}) {
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t, true);
  return grad_check_leaves([&] { return f(leaves); }, leaves, opt);
}

}  // namespace hff
