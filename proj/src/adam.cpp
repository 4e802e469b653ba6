#include "mxml/adam.hpp"

#include <cmath>

#include "mxml/error.hpp"

namespace mxml {

AdamState make_adam_state(std::span<const Tensor> params, double lr) {
  AdamState state;
  state.lr = lr;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), 0.0);
    state.v.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state tracks a different parameter set");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].numel() || state.m[k].size() != params[k].numel()) {
      throw ShapeError("adam_step: gradient size mismatch for parameter " + std::to_string(k) + " of shape " +
                       shape_to_string(params[k].shape()));
    }
    for (double g : grads[k]) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(k));
    }
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.numel(), 0.0);
    }
  }
  adam_step(params, grads, state);
  for (auto& p : params) p.zero_grad();
}

}  // namespace mxml
