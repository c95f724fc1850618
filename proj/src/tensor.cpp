// SPDX-License-Identifier: Apache-2.0
#include "scmoe/tensor.hpp"

#include <cmath>
#include <string>

#include "scmoe/error.hpp"

namespace scmoe {

void matvec(const Matrix& m, std::span<const float> x, std::span<float> y) {
  if (x.size() != m.cols || y.size() != m.rows) {
    throw Error(Errc::kInvalidArgument,
                "matvec: dimension mismatch (" + std::to_string(m.rows) + "x" +
                    std::to_string(m.cols) + " * " + std::to_string(x.size()) + ")");
  }
  const float* w = m.data.data();
  for (std::size_t r = 0; r < m.rows; ++r, w += m.cols) {
    float acc = 0.0f;
    for (std::size_t c = 0; c < m.cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

std::vector<float> matvec(const Matrix& m, std::span<const float> x) {
  std::vector<float> y(m.rows);
  matvec(m, x, y);
  return y;
}

std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain,
                            float eps) {
  if (x.size() != gain.size()) {
    throw Error(Errc::kInvalidArgument, "rms_norm: dimension mismatch");
  }
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float scale = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gain[i];
  return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace scmoe
