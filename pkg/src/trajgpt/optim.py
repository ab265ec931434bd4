"""Adam with bias correction, global-norm gradient clipping, linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers; allocated on first apply, shape-checked after."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One Adam update over parallel `params`/`grads` lists, in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    sq = 0.0
    for g in grads:
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, constant afterwards (no decay)."""

    base_lr: float
    warmup_steps: int = 0

    def lr(self, step: int) -> float:
        if step + 1 >= self.warmup_steps:
            return self.base_lr
        return self.base_lr * (step + 1) / self.warmup_steps
