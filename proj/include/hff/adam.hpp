#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hff/autograd.hpp"

namespace hff {

template <typename Scalar>
struct NamedParam {
  std::string name;
  Var<Scalar> var;
};

/// Moment buffers and step counter for Adam with bias correction.
template <typename Scalar>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor<Scalar>> first_moment;
  std::vector<Tensor<Scalar>> second_moment;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Parameters without a gradient are treated as having g = 0.
/// Throws ContractError naming the first parameter whose gradient is not
/// finite; in that case nothing is modified.
template <typename Scalar>
void adam_step(std::vector<NamedParam<Scalar>>& params, AdamState<Scalar>& state, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.var.shape());
      state.second_moment.emplace_back(p.var.shape());
    }
  }
  require(state.first_moment.size() == params.size(), "adam_step: state was built for a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(state.first_moment[i].shape() == params[i].var.shape(),
            "adam_step: moment shape mismatch for " + params[i].name);
    if (params[i].var.has_grad() && !params[i].var.grad().all_finite())
      throw ContractError("adam_step: non-finite gradient in parameter " + params[i].name);
  }
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, t));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, t));
  const auto step = static_cast<Scalar>(lr), eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i].array();
    auto& v = state.second_moment[i].array();
    if (params[i].var.has_grad()) {
      const auto& g = params[i].var.grad().array();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g * g;
    } else {
      m = b1 * m;
      v = b2 * v;
    }
    params[i].var.mutable_value().array() -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

template <typename Scalar>
void zero_grad(std::vector<NamedParam<Scalar>>& params) {
  for (auto& p : params) p.var.zero_grad();
}

}  // namespace hff
