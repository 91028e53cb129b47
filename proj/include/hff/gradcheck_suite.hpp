#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace hff {

/// One differentiable building block checked against central differences at
/// 64-bit precision. `run` draws shapes and values from `seed` and returns
/// the worst relative error.
struct GradCheckCase {
  std::string name;
  double tolerance = 1e-6;
  std::function<double(std::uint64_t seed)> run;
};

struct GradCheckOutcome {
  std::string name;
  double worst = 0.0;
  double tolerance = 0.0;
  int seeds = 0;
  bool passed = false;
};

/// Every op plus the composite blocks and the reduced full model.
std::vector<GradCheckCase> gradcheck_cases();

std::vector<GradCheckOutcome> run_gradcheck_suite(int seeds,
                                                  const std::function<void(const GradCheckOutcome&)>& report = {});

}  // namespace hff
