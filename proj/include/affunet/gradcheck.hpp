#pragma once

#include "affunet/tape.hpp"

namespace affunet {

// Central finite differences against reverse-mode gradients, always in f64.
// The error is the max elementwise deviation normalized by the largest
// gradient magnitude in the group (floored to dodge 0/0 at all-zero
// gradients).

struct GradCheckResult {
  std::string group;
  double max_rel_err = 0.0;
  double max_abs_grad = 0.0;
};

// loss_fn re-evaluates the scalar loss from the current parameter values; it
// must not record anything itself (a tape scope is installed here for the
// analytic pass only).
inline GradCheckResult check_gradient(const std::string& group,
                                      const std::function<Tensor<double>()>& loss_fn,
                                      Tensor<double>& param, double h = 1e-5) {
  // analytic pass
  param.set_requires_grad(true);
  param.zero_grad();
  std::vector<double> analytic(static_cast<size_t>(param.numel()));
  {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
    std::memcpy(analytic.data(), param.grad(), sizeof(double) * analytic.size());
  }
  param.set_requires_grad(false);

  GradCheckResult res;
  res.group = group;
  double denom = 1e-6;
  for (double a : analytic) denom = std::max(denom, std::abs(a));

  for (int64_t i = 0; i < param.numel(); ++i) {
    const double saved = param.at(i);
    param.at(i) = saved + h;
    const double fp = loss_fn().item();
    param.at(i) = saved - h;
    const double fm = loss_fn().item();
    param.at(i) = saved;
    const double fd = (fp - fm) / (2.0 * h);
    denom = std::max(denom, std::abs(fd));
    const double err = std::abs(analytic[static_cast<size_t>(i)] - fd);
    res.max_rel_err = std::max(res.max_rel_err, err);
    res.max_abs_grad = std::max(res.max_abs_grad, std::abs(fd));
  }
  res.max_rel_err /= denom;
  param.set_requires_grad(true);
  return res;
}

}  // namespace affunet
