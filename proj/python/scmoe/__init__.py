"""Self-contrast decoding for mixture-of-experts models."""

from ._scmoe import (
    BOS,
    EOS,
    Model,
    ModelConfig,
    ScmoeError,
    contrast_logits,
    decode,
    encode,
    expert_utilization,
    extract_numeric_answer,
    generate,
    js_divergence,
    kl_divergence,
    kld_heatmap,
    majority_vote,
    plausibility_mask,
    run_cli,
    select_experts,
    softmax,
)

__all__ = [
    "BOS",
    "EOS",
    "Model",
    "ModelConfig",
    "ScmoeError",
    "contrast_logits",
    "decode",
    "encode",
    "expert_utilization",
    "extract_numeric_answer",
    "generate",
    "js_divergence",
    "kl_divergence",
    "kld_heatmap",
    "majority_vote",
    "plausibility_mask",
    "run_cli",
    "select_experts",
    "softmax",
]
