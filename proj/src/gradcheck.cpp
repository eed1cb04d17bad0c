#include "mixsga/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mixsga {

GradCheckReport gradient_check(const std::function<Tensor<double>()>& loss,
                               std::vector<NamedTensor> params, const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;

  for (auto& p : params) {
    if (!std::all_of(p.tensor.data().begin(), p.tensor.data().end(),
                     [](double v) { return std::isfinite(v); })) {
      report.failure = "parameter '" + p.name + "' holds non-finite values";
      return report;
    }
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }

  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.tensor.numel(), 0.0);
  }

  NoGradGuard no_grad;
  bool all_finite = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    ParamCheck check{p.name, p.tensor.numel()};
    auto values = p.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double up = loss().item();
      values[i] = saved - options.eps;
      const double down = loss().item();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[pi][i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        check.finite = false;
        if (report.failure.empty())
          report.failure = "non-finite gradient for parameter '" + p.name + "'";
        continue;
      }
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      check.max_rel_error = std::max(check.max_rel_error, rel_err);
    }
    all_finite = all_finite && check.finite;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(std::move(check));
  }
  report.passed = all_finite && report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace mixsga
