// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace scmoe {

/// Row-major float32 matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  [[nodiscard]] std::span<float> row(std::size_t r) {
    return {data.data() + r * cols, cols};
  }
  [[nodiscard]] std::span<const float> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  [[nodiscard]] float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Kernels below accumulate strictly left to right so results are
// bit-reproducible for identical inputs.

/// y = m * x. Throws on dimension mismatch.
void matvec(const Matrix& m, std::span<const float> x, std::span<float> y);
std::vector<float> matvec(const Matrix& m, std::span<const float> x);

/// x * gain / rms(x).
std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain,
                            float eps);

float silu(float x);

}  // namespace scmoe
