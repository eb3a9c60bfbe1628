#pragma once

#include "affunet/tensor.hpp"

namespace affunet {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Adam state: first/second moment buffers per parameter plus a shared step
// counter. Moment buffers are keyed by position, so the parameter list handed
// to adam_step must stay stable across steps.
template <typename T>
struct OptimState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const std::vector<NamedParam<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
      v.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
    }
    step = 0;
  }
};

// One bias-corrected Adam update, in place. Parameters without a gradient
// buffer are skipped; a NaN gradient aborts with the parameter named.
template <typename T>
void adam_step(std::vector<NamedParam<T>>& params, OptimState<T>& state) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                " moment buffers for " + std::to_string(params.size()) +
                                " parameters");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& t = params[pi].tensor;
    const T* g = t.grad();
    if (g == nullptr) continue;
    if (state.m[pi].size() != static_cast<size_t>(t.numel()))
      throw std::invalid_argument("adam_step: moment buffer shape mismatch for parameter '" +
                                  params[pi].name + "'");
    T* m = state.m[pi].data();
    T* v = state.v[pi].data();
    T* w = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      if (std::isnan(gi))
        throw NumericalError("adam_step: NaN gradient for parameter '" + params[pi].name + "'");
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) -
                            state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template <typename T>
void zero_grads(std::vector<NamedParam<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace affunet
