// Copyright 2026 The avvad Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef AVVAD_ADAM_HPP_
#define AVVAD_ADAM_HPP_

#include <cmath>
#include <cstdint>
#include <iostream>
#include <vector>

#include "avvad/tensor.hpp"

namespace avvad {

// Bias-corrected Adam. Moment buffers are kept in the order of the parameter
// list handed to adam_step, which must not change between steps.
template <typename S>
struct AdamState {
  std::int64_t step_count = 0;
  std::vector<std::vector<S>> m, v;
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

template <typename S>
inline void adam_step(const std::vector<NamedParam<S>>& params, AdamState<S>& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor->size(), S(0));
      state.v[i].assign(params[i].tensor->size(), S(0));
    }
  }
  if (state.m.size() != params.size()) {
    fail("adam_step parameter list changed size since state was created");
  }
  ++state.step_count;
  const S bc1 = S(1) - std::pow(state.beta1, static_cast<S>(state.step_count));
  const S bc2 = S(1) - std::pow(state.beta2, static_cast<S>(state.step_count));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& t = *params[i].tensor;
    if (t.grad.size() != t.data.size()) {
      fail("adam_step parameter '" + params[i].name + "' has no gradient buffer");
    }
    bool finite = true;
    for (S g : t.grad) {
      if (!std::isfinite(static_cast<double>(g))) {
        finite = false;
        break;
      }
    }
    if (!finite) {
      std::cerr << "warning: non-finite gradient for '" << params[i].name
                << "', skipping its update this step\n";
      continue;
    }
    std::vector<S>& m = state.m[i];
    std::vector<S>& v = state.v[i];
    for (std::size_t j = 0; j < t.size(); ++j) {
      const S g = t.grad[j];
      m[j] = state.beta1 * m[j] + (S(1) - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (S(1) - state.beta2) * g * g;
      const S mhat = m[j] / bc1;
      const S vhat = v[j] / bc2;
      t.data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

template <typename S>
inline void zero_grads(const std::vector<NamedParam<S>>& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

}  // namespace avvad

#endif  // AVVAD_ADAM_HPP_
