#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixsga/tensor.hpp"

namespace mixsga {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct ParamCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string failure;  // names the first non-finite parameter, if any
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // near-zero gradients from amplifying finite-difference noise.
  double floor = 1e-6;
};

/// Compares analytic gradients of `loss` against central finite differences
/// over every entry of every parameter. Runs in 64-bit only.
GradCheckReport gradient_check(const std::function<Tensor<double>()>& loss,
                               std::vector<NamedTensor> params,
                               const GradCheckOptions& options = {});

}  // namespace mixsga
