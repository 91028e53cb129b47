#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "hff/random.hpp"
#include "hff/tensor.hpp"

namespace testing {

inline hff::Tensor<double> random_tensor(const hff::Shape& shape, hff::Rng& rng, double lo = -1.0, double hi = 1.0) {
  hff::Tensor<double> t(shape);
  for (hff::Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const hff::Tensor<double>& a, const hff::Tensor<double>& b) {
  double worst = 0.0;
  for (hff::Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Worst |a - b| / max(|b|, 1).
inline double max_rel_diff(const hff::Tensor<double>& a, const hff::Tensor<double>& b) {
  double worst = 0.0;
  for (hff::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1.0));
  return worst;
}

}  // namespace testing
