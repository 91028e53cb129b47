#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "hff/adam.hpp"
#include "hff/random.hpp"

namespace hff {

/// Ordered collection of learnable tensors keyed by hierarchical name
/// ("entry.s1.rgb.weight"). Registration order fixes checkpoint order.
template <typename Scalar>
class ParamStore {
 public:
  Var<Scalar> add(const std::string& name, const Tensor<double>& init) {
    require(!index_.contains(name), "duplicate parameter name " + name);
    Var<Scalar> v(init.template cast<Scalar>(), true);
    index_.emplace(name, params_.size());
    params_.push_back({name, v});
    return v;
  }

  Var<Scalar> get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter " + name);
    return params_[it->second].var;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::vector<NamedParam<Scalar>>& params() { return params_; }
  const std::vector<NamedParam<Scalar>>& params() const { return params_; }

  Index count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

 private:
  std::vector<NamedParam<Scalar>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor<double> normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
  return t;
}

// He (fan-in) initialization for a conv [Cout,Cin,kh,kw] or linear [Out,In] weight.
inline Tensor<double> he_normal(const Shape& shape, Rng& rng) {
  Index fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return normal_tensor(shape, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

inline Tensor<double> zeros(const Shape& shape) { return Tensor<double>(shape); }

}  // namespace hff
