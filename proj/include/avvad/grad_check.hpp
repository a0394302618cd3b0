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
//
// Central finite-difference validation of reverse-mode gradients. The loss
// callback rebuilds its forward pass from the current parameter values on
// every call; the harness perturbs one scalar at a time. A parameter whose
// perturbation flips any ReLU activation sign (or lands on a kink) is listed
// as excluded rather than failed, since the two one-sided derivatives differ
// there and the comparison is meaningless.

#ifndef AVVAD_GRAD_CHECK_HPP_
#define AVVAD_GRAD_CHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "avvad/adam.hpp"
#include "avvad/random.hpp"
#include "avvad/tensor.hpp"

namespace avvad {

template <typename S>
struct LossEval {
  S value = S(0);
  std::uint64_t relu_hash = 0;
  long relu_kinks = 0;
};

struct GradCheckOptions {
  double step = 1e-3;
  // cap on checked components per parameter tensor; <= 0 checks everything
  int max_per_param = 0;
  std::uint64_t sample_seed = 17;
};

template <typename S>
struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  S analytic = S(0);
  S numeric = S(0);
  S rel_err = S(0);
};

template <typename S>
struct GradCheckReport {
  S max_rel_err = S(0);
  std::vector<GradCheckEntry<S>> worst;     // entry with the max error first
  std::vector<GradCheckEntry<S>> excluded;  // kink-adjacent parameters, listed not failed
  std::size_t checked = 0;
  bool pass(S rel_tol) const { return max_rel_err < rel_tol; }
};

// loss_fn(with_grad): evaluates the objective from current parameter values;
// when with_grad is set it must also accumulate gradients into param.grad.
template <typename S>
GradCheckReport<S> grad_check(const std::function<LossEval<S>(bool)>& loss_fn,
                              const std::vector<NamedParam<S>>& params, S rel_tol,
                              GradCheckOptions opt = {}) {
  (void)rel_tol;
  const LossEval<S> base1 = loss_fn(false);
  const LossEval<S> base2 = loss_fn(false);
  if (base1.value != base2.value || base1.relu_hash != base2.relu_hash) {
    fail("grad_check requires a deterministic fragment (disable dropout)");
  }

  zero_grads(params);
  loss_fn(true);
  std::vector<std::vector<S>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic[i] = params[i].tensor->grad;

  GradCheckReport<S> report;
  Rng rng(opt.sample_seed);
  const S h = static_cast<S>(opt.step);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S>& t = *params[pi].tensor;
    std::vector<std::size_t> picks;
    if (opt.max_per_param > 0 && t.size() > static_cast<std::size_t>(opt.max_per_param)) {
      for (int k = 0; k < opt.max_per_param; ++k) {
        picks.push_back(static_cast<std::size_t>(rng.bits() % t.size()));
      }
      std::sort(picks.begin(), picks.end());
      picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
    } else {
      picks.resize(t.size());
      for (std::size_t k = 0; k < t.size(); ++k) picks[k] = k;
    }

    for (std::size_t j : picks) {
      const S saved = t.data[j];
      t.data[j] = saved + h;
      const LossEval<S> up = loss_fn(false);
      t.data[j] = saved - h;
      const LossEval<S> dn = loss_fn(false);
      t.data[j] = saved;

      GradCheckEntry<S> e;
      e.param = params[pi].name;
      e.index = j;
      e.analytic = analytic[pi][j];
      e.numeric = (up.value - dn.value) / (S(2) * h);
      const S denom = std::max({std::abs(e.analytic), std::abs(e.numeric), S(1e-8)});
      e.rel_err = std::abs(e.analytic - e.numeric) / denom;

      if (up.relu_hash != dn.relu_hash || up.relu_kinks > 0 || dn.relu_kinks > 0) {
        report.excluded.push_back(e);
        continue;
      }
      ++report.checked;
      if (e.rel_err > report.max_rel_err) {
        report.max_rel_err = e.rel_err;
        report.worst.assign(1, e);
      }
    }
  }
  return report;
}

}  // namespace avvad

#endif  // AVVAD_GRAD_CHECK_HPP_
