// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "scmoe/error.hpp"

namespace scmoe {

template <class ExpertFn>
std::vector<float> combine_experts(std::span<const float> h,
                                   const ExpertSelection& selection,
                                   std::size_t n_experts, ExpertFn&& expert_fn) {
  std::vector<float> out(h.size(), 0.0f);
  for (std::size_t s = 0; s < selection.indices.size(); ++s) {
    const int idx = selection.indices[s];
    if (idx < 0 || static_cast<std::size_t>(idx) >= n_experts) {
      throw Error(Errc::kInvalidArgument,
                  "expert index " + std::to_string(idx) + " out of range");
    }
    const std::vector<float> y = expert_fn(idx, h);
    if (y.size() != h.size()) {
      throw Error(Errc::kInvalidArgument, "expert output width mismatch");
    }
    const auto w = static_cast<float>(selection.weights[s]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * y[i];
  }
  return out;
}

}  // namespace scmoe
