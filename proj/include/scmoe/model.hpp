// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "scmoe/core_math.hpp"
#include "scmoe/random.hpp"
#include "scmoe/routing.hpp"
#include "scmoe/tensor.hpp"

namespace scmoe {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int n_experts = 8;
  int n_shared_experts = 0;
  int d_ff = 128;
  int vocab_size = 260;
  int max_seq_len = 512;
  /// Every `moe_every`-th layer (starting at layer 0) is an MoE layer; the rest
  /// use a single dense feed-forward block. 1 means all layers are MoE.
  int moe_every = 1;
  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;
  std::uint64_t rng_seed = 0;

  void validate() const;
  [[nodiscard]] int head_dim() const { return d_model / n_heads; }
  [[nodiscard]] bool is_moe_layer(int layer) const { return layer % moe_every == 0; }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;
  Matrix wq, wk, wv, wo;
  std::vector<float> ffn_norm;
  Matrix router;  // n_experts x d_model; empty on dense layers
  std::vector<ExpertWeights> experts;  // one entry on dense layers
};

struct ModelWeights {
  Matrix tok_embeddings;  // vocab x d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  Matrix output;  // vocab x d_model
};

/// Immutable model: weights plus the shared early-exit head. Safe to share
/// read-only between any number of generation contexts.
class Model {
 public:
  Model(ModelConfig config, ModelWeights weights);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const ModelWeights& weights() const { return weights_; }

  /// Final norm followed by the vocabulary projection. Applied to the last
  /// block's output this is the model's own head; applied to an earlier
  /// block's output it gives early-exit logits.
  [[nodiscard]] LogitVector head(std::span<const float> hidden) const;

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

struct LayerRecord {
  bool moe = true;
  GateVector gates;  // empty on dense layers
  ExpertSelection selection;
};

struct StepOutput {
  LogitVector logits;
  std::vector<LayerRecord> layer_records;
  /// Residual stream after the last block, before the final norm.
  std::vector<float> hidden_final;
  /// Residual stream after each block; filled only when requested.
  std::vector<std::vector<float>> hidden_by_layer;
};

struct ForwardOptions {
  bool keep_hidden_by_layer = false;
};

/// Token history, KV cache and routing state of one decoding trajectory.
/// Owned by a single worker at a time; the Model must outlive it.
class GenerationContext {
 public:
  GenerationContext(const Model& model, RoutingStrategy strategy, std::uint64_t seed);

  /// Runs the new tokens through the model one position at a time, extending
  /// the cache. Returns one StepOutput per new position.
  std::vector<StepOutput> forward(std::span<const int> tokens, ForwardOptions opts = {});
  StepOutput forward_one(int token, ForwardOptions opts = {});

  /// Drops cached positions beyond `length` (used for look-ahead probes).
  /// The routing rng is not rewound.
  void truncate(std::size_t length);

  [[nodiscard]] std::size_t length() const { return history_.size(); }
  [[nodiscard]] const std::vector<int>& history() const { return history_; }
  [[nodiscard]] const RoutingStrategy& strategy() const { return strategy_; }
  [[nodiscard]] const Model& model() const { return *model_; }

 private:
  StepOutput forward_unchecked(int token, ForwardOptions opts);

  const Model* model_;
  RoutingStrategy strategy_;
  Rng rng_;
  std::vector<int> history_;
  // Per layer, row-major [position][d_model] after rotary encoding.
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

/// early-exit logits for the residual stream after block `layer`.
LogitVector early_exit_logits(const Model& model, std::span<const float> hidden_at_layer,
                              int layer);

}  // namespace scmoe
