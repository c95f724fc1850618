// SPDX-License-Identifier: Apache-2.0
#include "scmoe/model.hpp"

#include <cmath>
#include <string>

#include "scmoe/error.hpp"

namespace scmoe {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::kInvalidArgument, "invalid model config: " + what);
}

void apply_rope(std::span<float> v, int n_heads, int head_dim, std::size_t pos, float theta) {
  for (int h = 0; h < n_heads; ++h) {
    float* x = v.data() + static_cast<std::size_t>(h) * head_dim;
    for (int i = 0; i < head_dim; i += 2) {
      const double freq = std::pow(static_cast<double>(theta), -static_cast<double>(i) / head_dim);
      const double angle = static_cast<double>(pos) * freq;
      const auto c = static_cast<float>(std::cos(angle));
      const auto s = static_cast<float>(std::sin(angle));
      const float a = x[i];
      const float b = x[i + 1];
      x[i] = a * c - b * s;
      x[i + 1] = a * s + b * c;
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(n_layers > 0, "n_layers must be positive");
  require(d_model > 0, "d_model must be positive");
  require(n_heads > 0 && d_model % n_heads == 0, "n_heads must divide d_model");
  require(head_dim() % 2 == 0, "head dimension must be even for rotary encoding");
  require(n_experts > 0, "n_experts must be positive");
  require(n_shared_experts >= 0 && n_shared_experts < n_experts,
          "n_shared_experts must lie in [0, n_experts)");
  require(d_ff > 0, "d_ff must be positive");
  require(vocab_size > 0, "vocab_size must be positive");
  require(max_seq_len > 0, "max_seq_len must be positive");
  require(moe_every > 0, "moe_every must be positive");
  require(rope_theta > 0.0f && norm_eps > 0.0f, "rope_theta and norm_eps must be positive");
}

Model::Model(ModelConfig config, ModelWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  auto shape_ok = [](const Matrix& m, std::size_t r, std::size_t c) {
    return m.rows == r && m.cols == c && m.data.size() == r * c;
  };
  auto fail = [](const std::string& what) {
    throw Error(Errc::kShapeMismatch, "model weights: " + what);
  };
  if (!shape_ok(weights_.tok_embeddings, vocab, d)) fail("tok_embeddings");
  if (!shape_ok(weights_.output, vocab, d)) fail("output");
  if (weights_.final_norm.size() != d) fail("final_norm");
  if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers)) fail("layer count");
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  for (std::size_t l = 0; l < weights_.layers.size(); ++l) {
    const LayerWeights& lw = weights_.layers[l];
    const std::string at = "layer " + std::to_string(l);
    if (lw.attn_norm.size() != d || lw.ffn_norm.size() != d) fail(at + " norms");
    for (const Matrix* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo}) {
      if (!shape_ok(*m, d, d)) fail(at + " attention");
    }
    const bool moe = config_.is_moe_layer(static_cast<int>(l));
    const std::size_t n_exp = moe ? static_cast<std::size_t>(config_.n_experts) : 1;
    if (lw.experts.size() != n_exp) fail(at + " expert count");
    if (moe && !shape_ok(lw.router, n_exp, d)) fail(at + " router");
    for (const ExpertWeights& e : lw.experts) {
      if (!shape_ok(e.gate, ff, d) || !shape_ok(e.up, ff, d) || !shape_ok(e.down, d, ff)) {
        fail(at + " expert");
      }
    }
  }
}

LogitVector Model::head(std::span<const float> hidden) const {
  if (hidden.size() != static_cast<std::size_t>(config_.d_model)) {
    throw Error(Errc::kInvalidArgument, "head: hidden width mismatch");
  }
  const std::vector<float> normed = rms_norm(hidden, weights_.final_norm, config_.norm_eps);
  const std::vector<float> logits = matvec(weights_.output, normed);
  return LogitVector(logits.begin(), logits.end());
}

LogitVector early_exit_logits(const Model& model, std::span<const float> hidden_at_layer,
                              int layer) {
  if (layer < 0 || layer >= model.config().n_layers) {
    throw Error(Errc::kInvalidArgument, "early_exit_logits: layer " + std::to_string(layer) +
                                            " out of range");
  }
  return model.head(hidden_at_layer);
}

GenerationContext::GenerationContext(const Model& model, RoutingStrategy strategy,
                                     std::uint64_t seed)
    : model_(&model), strategy_(std::move(strategy)), rng_(seed) {
  if (!strategy_.shared_experts) strategy_.shared_experts = model.config().n_shared_experts;
  strategy_.validate(model.config().n_experts);
  keys_.resize(static_cast<std::size_t>(model.config().n_layers));
  values_.resize(keys_.size());
}

void GenerationContext::truncate(std::size_t length) {
  if (length >= history_.size()) return;
  const auto d = static_cast<std::size_t>(model_->config().d_model);
  history_.resize(length);
  for (auto& k : keys_) k.resize(length * d);
  for (auto& v : values_) v.resize(length * d);
}

std::vector<StepOutput> GenerationContext::forward(std::span<const int> tokens,
                                                   ForwardOptions opts) {
  std::vector<StepOutput> out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(forward_one(t, opts));
  return out;
}

StepOutput GenerationContext::forward_one(int token, ForwardOptions opts) {
  const std::size_t before = history_.size();
  try {
    return forward_unchecked(token, opts);
  } catch (...) {
    // Keep the cache consistent with the history if a layer failed midway.
    const auto d = static_cast<std::size_t>(model_->config().d_model);
    for (auto& k : keys_) k.resize(before * d);
    for (auto& v : values_) v.resize(before * d);
    throw;
  }
}

StepOutput GenerationContext::forward_unchecked(int token, ForwardOptions opts) {
  const ModelConfig& cfg = model_->config();
  const ModelWeights& w = model_->weights();
  if (history_.size() >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw Error(Errc::kContextOverflow,
                "context overflow: max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if (token < 0 || token >= cfg.vocab_size) {
    throw Error(Errc::kTokenOutOfRange, "token id " + std::to_string(token) + " out of range");
  }

  const auto d = static_cast<std::size_t>(cfg.d_model);
  const int head_dim = cfg.head_dim();
  const std::size_t pos = history_.size();
  const float attn_scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

  std::vector<float> x(w.tok_embeddings.row(static_cast<std::size_t>(token)).begin(),
                       w.tok_embeddings.row(static_cast<std::size_t>(token)).end());
  StepOutput step;
  step.layer_records.reserve(w.layers.size());

  std::vector<float> scores(pos + 1);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];

    // Attention block.
    const std::vector<float> hn = rms_norm(x, lw.attn_norm, cfg.norm_eps);
    std::vector<float> q = matvec(lw.wq, hn);
    std::vector<float> k = matvec(lw.wk, hn);
    const std::vector<float> v = matvec(lw.wv, hn);
    apply_rope(q, cfg.n_heads, head_dim, pos, cfg.rope_theta);
    apply_rope(k, cfg.n_heads, head_dim, pos, cfg.rope_theta);
    keys_[l].insert(keys_[l].end(), k.begin(), k.end());
    values_[l].insert(values_[l].end(), v.begin(), v.end());

    std::vector<float> attn(d, 0.0f);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * head_dim;
      float max_score = 0.0f;
      for (std::size_t p = 0; p <= pos; ++p) {
        const float* kp = keys_[l].data() + p * d + off;
        float s = 0.0f;
        for (int i = 0; i < head_dim; ++i) s += q[off + i] * kp[i];
        s *= attn_scale;
        scores[p] = s;
        if (p == 0 || s > max_score) max_score = s;
      }
      float denom = 0.0f;
      for (std::size_t p = 0; p <= pos; ++p) {
        scores[p] = std::exp(scores[p] - max_score);
        denom += scores[p];
      }
      for (std::size_t p = 0; p <= pos; ++p) {
        const float a = scores[p] / denom;
        const float* vp = values_[l].data() + p * d + off;
        for (int i = 0; i < head_dim; ++i) attn[off + i] += a * vp[i];
      }
    }
    const std::vector<float> attn_out = matvec(lw.wo, attn);
    for (std::size_t i = 0; i < d; ++i) x[i] += attn_out[i];

    // Feed-forward block.
    const std::vector<float> fn = rms_norm(x, lw.ffn_norm, cfg.norm_eps);
    LayerRecord record;
    std::vector<float> ffn;
    if (cfg.is_moe_layer(static_cast<int>(l))) {
      record.gates = compute_gates(lw.router, fn);
      record.selection = select_experts(record.gates, strategy_, rng_);
      ffn = moe_layer_forward(fn, record.selection, lw.experts);
    } else {
      record.moe = false;
      record.selection.indices = {0};
      record.selection.weights = {1.0};
      ffn = expert_forward(lw.experts.front(), fn);
    }
    for (std::size_t i = 0; i < d; ++i) x[i] += ffn[i];
    step.layer_records.push_back(std::move(record));
    if (opts.keep_hidden_by_layer) step.hidden_by_layer.push_back(x);
  }

  step.logits = model_->head(x);
  step.hidden_final = std::move(x);
  history_.push_back(token);
  return step;
}

}  // namespace scmoe
