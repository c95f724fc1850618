// SPDX-License-Identifier: Apache-2.0
#include "scmoe/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "scmoe/error.hpp"

namespace scmoe {

double max_unmasked(std::span<const double> z) {
  bool found = false;
  double best = 0.0;
  for (double v : z) {
    if (is_masked(v)) continue;
    if (!found || v > best) {
      best = v;
      found = true;
    }
  }
  if (!found) throw Error(Errc::kEmptySupport, "empty support");
  return best;
}

ProbVector softmax(std::span<const double> z) {
  const double m = max_unmasked(z);
  ProbVector out(z.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (is_masked(z[i])) continue;
    out[i] = std::exp(z[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

LogitVector log_softmax(std::span<const double> z) {
  const double m = max_unmasked(z);
  double sum = 0.0;
  for (double v : z) {
    if (!is_masked(v)) sum += std::exp(v - m);
  }
  const double log_norm = m + std::log(sum);
  LogitVector out(z.size(), kMaskedLogit);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!is_masked(z[i])) out[i] = z[i] - log_norm;
  }
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw Error(Errc::kInvalidArgument,
                "kl_divergence: length mismatch (" + std::to_string(p.size()) +
                    " vs " + std::to_string(q.size()) + ")");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw Error(Errc::kUnboundedDivergence, "unbounded divergence");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  // Rounding can leave a tiny negative residue when p ~ q.
  return std::max(kl, 0.0);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw Error(Errc::kInvalidArgument, "js_divergence: length mismatch");
  }
  ProbVector mid(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) mid[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl_divergence(p, mid) + 0.5 * kl_divergence(q, mid);
}

std::vector<std::size_t> ranked_indices(std::span<const double> w) {
  if (w.empty()) throw Error(Errc::kInvalidArgument, "ranked_indices: empty input");
  if (std::any_of(w.begin(), w.end(), [](double v) { return std::isnan(v); })) {
    throw Error(Errc::kInvalidArgument, "ranked_indices: NaN in input");
  }
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  return idx;
}

std::size_t argmax(std::span<const double> z) {
  std::size_t best = z.size();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (is_masked(z[i])) continue;
    if (best == z.size() || z[i] > z[best]) best = i;
  }
  if (best == z.size()) throw Error(Errc::kEmptySupport, "empty support");
  return best;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw Error(Errc::kInvalidArgument, "cosine_similarity: length mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace scmoe
