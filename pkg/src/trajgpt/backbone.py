"""Causal transformer decoder shared by the trajectory and language heads.

Pre-layernorm GPT2-style blocks. Positional information is the caller's
responsibility, which is what keeps the backbone modality-agnostic and the
"transplant the sub-module" operation well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    dropout,
    gelu,
    layernorm,
    matmul,
    mul,
    parameter,
    reshape,
    softmax,
    transpose,
)

ATTN_MASK_VALUE = -1e30
INIT_STD = 0.02


class ContextOverflowError(ValueError):
    """Sequence longer than the configured maximum number of positions."""


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 3
    dropout: float = 0.1
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_positions < 1:
            raise ValueError("max_positions must be positive")


class BackboneWeights:
    """Named parameter bundle for the transformer blocks plus final layernorm."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def expected_param_count(config: BackboneConfig) -> int:
    """Closed-form parameter count: attention 4(d^2+d), MLP 8d^2+5d, 2 LNs of 2d per layer, final LN 2d."""
    d = config.d_model
    per_layer = 4 * (d * d + d) + (8 * d * d + 5 * d) + 4 * d
    return config.n_layers * per_layer + 2 * d


def backbone_param_names(config: BackboneConfig) -> list[str]:
    names = []
    for i in range(config.n_layers):
        h = f"backbone.h{i}"
        names += [f"{h}.ln1.gain", f"{h}.ln1.bias"]
        names += [f"{h}.attn.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"{h}.ln2.gain", f"{h}.ln2.bias"]
        names += [f"{h}.mlp.w1", f"{h}.mlp.b1", f"{h}.mlp.w2", f"{h}.mlp.b2"]
    names += ["backbone.ln_f.gain", "backbone.ln_f.bias"]
    return sorted(names)


def init_backbone(config: BackboneConfig, seed: int) -> BackboneWeights:
    """Gaussian(0, 0.02) weights, zero biases, unit layernorm gains; deterministic per seed."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    params: dict[str, Tensor] = {}

    def gauss(*shape):
        return parameter(rng.normal(0.0, INIT_STD, size=shape))

    def zeros(*shape):
        return parameter(np.zeros(shape))

    def ones(*shape):
        return parameter(np.ones(shape))

    for i in range(config.n_layers):
        h = f"backbone.h{i}"
        params[f"{h}.ln1.gain"] = ones(d)
        params[f"{h}.ln1.bias"] = zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{h}.attn.{w}"] = gauss(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            params[f"{h}.attn.{b}"] = zeros(d)
        params[f"{h}.ln2.gain"] = ones(d)
        params[f"{h}.ln2.bias"] = zeros(d)
        params[f"{h}.mlp.w1"] = gauss(d, 4 * d)
        params[f"{h}.mlp.b1"] = zeros(4 * d)
        params[f"{h}.mlp.w2"] = gauss(4 * d, d)
        params[f"{h}.mlp.b2"] = zeros(d)
    params["backbone.ln_f.gain"] = ones(d)
    params["backbone.ln_f.bias"] = zeros(d)
    return BackboneWeights(config, params)


def _attention_bias(T: int, pad_mask: np.ndarray | None, B: int) -> np.ndarray:
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    if pad_mask is None:
        return np.where(causal, ATTN_MASK_VALUE, 0.0)
    real = np.asarray(pad_mask, dtype=bool)
    if real.ndim == 1:
        real = np.broadcast_to(real, (B, T))
    # a query may always attend to itself so padded rows stay finite
    key_blocked = ~real[:, None, :] & ~np.eye(T, dtype=bool)[None, :, :]
    blocked = causal[None, :, :] | key_blocked
    return np.where(blocked[:, None, :, :], ATTN_MASK_VALUE, 0.0)


def backbone_forward(
    weights: BackboneWeights,
    inputs: Tensor,
    pad_mask=None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the decoder stack. `inputs` is (T, d) or (B, T, d), already embedded.

    `pad_mask` marks real positions with True; padded keys are excluded from
    attention. Attention is strictly causal. Passing `rng` enables dropout
    (training mode); `None` runs deterministically without dropout.
    """
    cfg = weights.config
    squeeze = inputs.ndim == 2
    x = reshape(inputs, (1,) + inputs.shape) if squeeze else inputs
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"expected (B, T, {cfg.d_model}) inputs, got {inputs.shape}")
    B, T, d = x.shape
    if T > cfg.max_positions:
        raise ContextOverflowError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
    nh = cfg.n_heads
    dh = d // nh
    p = weights.params
    bias = Tensor(_attention_bias(T, pad_mask, B))
    scale = 1.0 / np.sqrt(dh)

    for i in range(cfg.n_layers):
        h = f"backbone.h{i}"
        a = layernorm(x, p[f"{h}.ln1.gain"], p[f"{h}.ln1.bias"])
        q = add(matmul(a, p[f"{h}.attn.wq"]), p[f"{h}.attn.bq"])
        k = add(matmul(a, p[f"{h}.attn.wk"]), p[f"{h}.attn.bk"])
        v = add(matmul(a, p[f"{h}.attn.wv"]), p[f"{h}.attn.bv"])
        q = transpose(reshape(q, (B, T, nh, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, T, nh, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, T, nh, dh)), (0, 2, 1, 3))
        scores = add(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), bias)
        probs = dropout(softmax(scores, axis=-1), cfg.dropout, rng)
        ctx = transpose(matmul(probs, v), (0, 2, 1, 3))
        ctx = reshape(ctx, (B, T, d))
        proj = add(matmul(ctx, p[f"{h}.attn.wo"]), p[f"{h}.attn.bo"])
        x = add(x, dropout(proj, cfg.dropout, rng))

        m = layernorm(x, p[f"{h}.ln2.gain"], p[f"{h}.ln2.bias"])
        m = gelu(add(matmul(m, p[f"{h}.mlp.w1"]), p[f"{h}.mlp.b1"]))
        m = add(matmul(m, p[f"{h}.mlp.w2"]), p[f"{h}.mlp.b2"])
        x = add(x, dropout(m, cfg.dropout, rng))

    x = layernorm(x, p["backbone.ln_f.gain"], p["backbone.ln_f.bias"])
    return reshape(x, (T, d)) if squeeze else x
