#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mxml/tensor.hpp"

namespace mxml {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

AdamState make_adam_state(std::span<const Tensor> params, double lr);

// One bias-corrected Adam update of `params` with explicit gradients. Moments
// are lazily sized on the first step. Throws NumericError on a non-finite
// gradient and ShapeError on mismatched sizes; on error nothing is modified.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state);

// Same, reading each parameter's populated grad(); absent gradients count as
// zero. Gradients are cleared afterwards.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace mxml
