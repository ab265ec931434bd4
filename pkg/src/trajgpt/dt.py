"""Decision-Transformer head: return-to-go windows over logged trajectories,
(R, s, a) interleaving with timestep embeddings, action regression training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import (
    INIT_STD,
    BackboneConfig,
    BackboneWeights,
    backbone_forward,
    init_backbone,
)
from .checkpoint import Checkpoint
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm
from .tensor import (
    EmptyReductionError,
    ShapeError,
    Tensor,
    add,
    concat,
    embedding_lookup,
    layernorm,
    matmul,
    mse,
    parameter,
    reshape,
    take_rows,
    tanh,
)

MAX_TIMESTEP = 1024
GRAD_CLIP = 1.0


@dataclass(frozen=True)
class Trajectory:
    """One logged episode: equal-length state/action/reward streams."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    env_name: str

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.float64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.float64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.rewards.ndim != 1:
            raise ShapeError(
                f"trajectory streams must be (T, d_s), (T, d_a), (T,); got "
                f"{self.states.shape}, {self.actions.shape}, {self.rewards.shape}"
            )
        lengths = {self.states.shape[0], self.actions.shape[0], self.rewards.shape[0]}
        if len(lengths) != 1 or self.length < 1:
            raise ShapeError(f"stream lengths disagree or are empty: {sorted(lengths)}")
        if np.abs(self.actions).max() > 1.0 + 1e-12:
            raise ValueError(f"actions exceed [-1, 1]: max |a| = {np.abs(self.actions).max()}")

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class DTBatch:
    """A batch of context windows. `slot_order[b, k, j]` names the modality
    (0=R, 1=s, 2=a) occupying slot j of step k; None means canonical (R, s, a).
    """

    returns_to_go: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray
    slot_order: np.ndarray | None = None

    def __post_init__(self):
        self.returns_to_go = np.asarray(self.returns_to_go, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        b, k = self.returns_to_go.shape
        if self.states.shape[:2] != (b, k) or self.actions.shape[:2] != (b, k):
            raise ShapeError("states/actions leading dims disagree with returns_to_go")
        if self.timesteps.shape != (b, k) or self.mask.shape != (b, k):
            raise ShapeError("timesteps/mask must be (B, K)")
        if np.any(self.timesteps < 0):
            raise ValueError("timesteps must be non-negative")
        if self.slot_order is not None:
            self.slot_order = np.asarray(self.slot_order, dtype=np.int64)
            if self.slot_order.shape != (b, k, 3):
                raise ShapeError(f"slot_order must be (B, K, 3), got {self.slot_order.shape}")
            if not np.all(np.sort(self.slot_order, axis=2) == np.array([0, 1, 2])):
                raise ValueError("each slot_order triple must be a permutation of (0, 1, 2)")

    @property
    def batch_size(self) -> int:
        return self.returns_to_go.shape[0]

    @property
    def context_length(self) -> int:
        return self.returns_to_go.shape[1]


def returns_to_go(rewards) -> np.ndarray:
    """Suffix sums: out[t] = rewards[t] + rewards[t+1] + ... + rewards[-1]."""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size == 0:
        raise EmptyReductionError("returns_to_go of an empty reward sequence")
    return np.cumsum(rewards[::-1])[::-1].copy()


def sample_window(traj: Trajectory, start: int, K: int, rtg_scale: float) -> DTBatch:
    """One B=1 window [start, start+K), right-padded past the episode end."""
    if not 0 <= start < traj.length:
        raise IndexError(f"window start {start} outside episode of length {traj.length}")
    if K < 1:
        raise ValueError("context length must be at least 1")
    if rtg_scale == 0.0:
        raise ValueError("rtg_scale must be nonzero")
    real = min(K, traj.length - start)
    rtg = np.zeros((1, K))
    states = np.zeros((1, K, traj.d_s))
    actions = np.zeros((1, K, traj.d_a))
    timesteps = np.zeros((1, K), dtype=np.int64)
    mask = np.zeros((1, K), dtype=bool)
    rtg[0, :real] = returns_to_go(traj.rewards)[start : start + real] / rtg_scale
    states[0, :real] = traj.states[start : start + real]
    actions[0, :real] = traj.actions[start : start + real]
    timesteps[0, :real] = np.arange(start, start + real)
    mask[0, :real] = True
    return DTBatch(rtg, states, actions, timesteps, mask)


def stack_windows(rows: Sequence[DTBatch]) -> DTBatch:
    return DTBatch(
        np.concatenate([r.returns_to_go for r in rows]),
        np.concatenate([r.states for r in rows]),
        np.concatenate([r.actions for r in rows]),
        np.concatenate([r.timesteps for r in rows]),
        np.concatenate([r.mask for r in rows]),
    )


class DTHeadWeights:
    """Modality embedders, timestep table, post-embed layernorm, action head."""

    def __init__(self, d_s: int, d_a: int, d_model: int, max_timestep: int, params: dict[str, Tensor]):
        self.d_s = d_s
        self.d_a = d_a
        self.d_model = d_model
        self.max_timestep = max_timestep
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def dt_head_param_names() -> list[str]:
    return sorted(
        [
            "dt.embed_return.w",
            "dt.embed_return.b",
            "dt.embed_state.w",
            "dt.embed_state.b",
            "dt.embed_action.w",
            "dt.embed_action.b",
            "dt.timestep.table",
            "dt.embed_ln.gain",
            "dt.embed_ln.bias",
            "dt.predict_action.w",
            "dt.predict_action.b",
        ]
    )


def init_dt_head(d_s: int, d_a: int, d_model: int, seed: int, max_timestep: int = MAX_TIMESTEP) -> DTHeadWeights:
    rng = np.random.default_rng(seed)
    d = d_model

    def gauss(*shape):
        return parameter(rng.normal(0.0, INIT_STD, size=shape))

    params = {
        "dt.embed_return.w": gauss(1, d),
        "dt.embed_return.b": parameter(np.zeros(d)),
        "dt.embed_state.w": gauss(d_s, d),
        "dt.embed_state.b": parameter(np.zeros(d)),
        "dt.embed_action.w": gauss(d_a, d),
        "dt.embed_action.b": parameter(np.zeros(d)),
        "dt.timestep.table": gauss(max_timestep, d),
        "dt.embed_ln.gain": parameter(np.ones(d)),
        "dt.embed_ln.bias": parameter(np.zeros(d)),
        "dt.predict_action.w": gauss(d, d_a),
        "dt.predict_action.b": parameter(np.zeros(d_a)),
    }
    return DTHeadWeights(d_s, d_a, d_model, max_timestep, params)


def interleave_embed(head: DTHeadWeights, batch: DTBatch) -> Tensor:
    """Embed the three streams, add per-step timestep embeddings to each of a
    step's three tokens, lay tokens out as (R_t, s_t, a_t) per step (or per
    `slot_order`), then layernorm. Output is (B, 3K, d_model).
    """
    b, k = batch.returns_to_go.shape
    if batch.states.shape[2] != head.d_s or batch.actions.shape[2] != head.d_a:
        raise ShapeError(
            f"batch dims (d_s={batch.states.shape[2]}, d_a={batch.actions.shape[2]}) "
            f"do not match head (d_s={head.d_s}, d_a={head.d_a})"
        )
    if batch.timesteps.max() >= head.max_timestep:
        raise IndexError(
            f"timestep {batch.timesteps.max()} outside embedding table of size {head.max_timestep}"
        )
    p = head.params
    d = head.d_model
    ts = embedding_lookup(p["dt.timestep.table"], batch.timesteps.reshape(-1))
    ts = reshape(ts, (b, k, d))
    r = add(add(matmul(Tensor(batch.returns_to_go.reshape(b, k, 1)), p["dt.embed_return.w"]), p["dt.embed_return.b"]), ts)
    s = add(add(matmul(Tensor(batch.states), p["dt.embed_state.w"]), p["dt.embed_state.b"]), ts)
    a = add(add(matmul(Tensor(batch.actions), p["dt.embed_action.w"]), p["dt.embed_action.b"]), ts)
    triples = concat(
        [reshape(r, (b, k, 1, d)), reshape(s, (b, k, 1, d)), reshape(a, (b, k, 1, d))], axis=2
    )
    if batch.slot_order is not None:
        flat = reshape(triples, (b * k * 3, d))
        base = (np.arange(b * k) * 3)[:, None]
        idx = (base + batch.slot_order.reshape(b * k, 3)).reshape(-1)
        triples = take_rows(flat, idx)
    seq = reshape(triples, (b, 3 * k, d))
    return layernorm(seq, p["dt.embed_ln.gain"], p["dt.embed_ln.bias"])


def dt_forward(
    head: DTHeadWeights,
    backbone: BackboneWeights,
    batch: DTBatch,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predicted actions (B, K, d_a) in [-1, 1]; step t is read off the
    backbone output at the s_t slot, the token right before a_t.
    """
    b, k = batch.returns_to_go.shape
    seq = interleave_embed(head, batch)
    token_mask = np.repeat(batch.mask, 3, axis=1)
    h = backbone_forward(backbone, seq, pad_mask=token_mask, rng=rng)
    s_slots = (np.arange(b)[:, None] * 3 * k + 3 * np.arange(k)[None, :] + 1).reshape(-1)
    h_s = reshape(take_rows(reshape(h, (b * 3 * k, head.d_model)), s_slots), (b, k, head.d_model))
    pred = add(matmul(h_s, head.params["dt.predict_action.w"]), head.params["dt.predict_action.b"])
    return tanh(pred)


def dt_loss(head: DTHeadWeights, backbone: BackboneWeights, batch: DTBatch,
            rng: np.random.Generator | None = None) -> Tensor:
    """Masked MSE between predicted and logged actions."""
    pred = dt_forward(head, backbone, batch, rng=rng)
    mask = np.repeat(batch.mask[:, :, None], head.d_a, axis=2).astype(np.float64)
    return mse(pred, batch.actions, mask)


@dataclass(frozen=True)
class DTTrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    context_length: int = 20
    warmup_steps: int = 10_000
    epochs: int = 40
    rtg_scale: float | None = None
    seed: int = 0
    heldout_frac: float = 0.1
    eval_every: int = 50
    eval_windows: int = 64
    max_steps: int | None = None
    stop_at_eval_frac: float | None = None


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_mses: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        by_eval = dict(zip(self.eval_steps, self.eval_mses))
        out = []
        for step, loss, lr in zip(self.steps, self.losses, self.lrs):
            line = f"step {step} loss {format(loss, '.17g')} lr {format(lr, '.17g')}"
            if step in by_eval:
                line += f" heldout_mse {format(by_eval[step], '.17g')}"
            out.append(line)
        return out


class _WindowSampler:
    """Uniform over (trajectory, start) pairs weighted by trajectory length,
    realized by drawing a global step index and locating its episode.
    """

    def __init__(self, trajectories: Sequence[Trajectory]):
        self.trajectories = list(trajectories)
        lengths = np.array([t.length for t in self.trajectories], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.total_steps = int(self.offsets[-1])

    def draw(self, rng: np.random.Generator, count: int, K: int, rtg_scale: float) -> DTBatch:
        flat = rng.integers(0, self.total_steps, size=count)
        rows = []
        for idx in flat:
            ti = int(np.searchsorted(self.offsets, idx, side="right")) - 1
            start = int(idx - self.offsets[ti])
            rows.append(sample_window(self.trajectories[ti], start, K, rtg_scale))
        return stack_windows(rows)


def _check_dims(dataset: Sequence[Trajectory]) -> tuple[int, int]:
    if not dataset:
        raise ValueError("empty trajectory dataset")
    d_s, d_a = dataset[0].d_s, dataset[0].d_a
    for i, traj in enumerate(dataset):
        if traj.d_s != d_s or traj.d_a != d_a:
            raise ShapeError(
                f"trajectory {i} has dims (d_s={traj.d_s}, d_a={traj.d_a}), expected ({d_s}, {d_a})"
            )
    return d_s, d_a


def default_rtg_scale(trajectories: Sequence[Trajectory]) -> float:
    peak = max(float(np.abs(returns_to_go(t.rewards)).max()) for t in trajectories)
    return peak if peak > 0.0 else 1.0


def train_dt(
    dataset: Sequence[Trajectory],
    cfg: DTTrainConfig,
    backbone_cfg: BackboneConfig | None = None,
    augment: Callable[[DTBatch, int], DTBatch] | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Minimize masked action MSE over sampled context windows; returns the
    trained weights as a Checkpoint with provenance "rl-pretrained" plus the
    full loss curve. Bit-identical per (dataset, cfg).
    """
    backbone_cfg = backbone_cfg or BackboneConfig()
    if 3 * cfg.context_length > backbone_cfg.max_positions:
        raise ValueError(
            f"3*K = {3 * cfg.context_length} tokens exceed max_positions {backbone_cfg.max_positions}"
        )
    d_s, d_a = _check_dims(dataset)

    seeds = np.random.SeedSequence(cfg.seed).generate_state(4, np.uint64)
    sampler_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    eval_rng = np.random.default_rng(seeds[2])

    order = np.random.default_rng(seeds[3]).permutation(len(dataset))
    n_held = min(max(1, round(cfg.heldout_frac * len(dataset))), len(dataset) - 1) if len(dataset) > 1 else 0
    held = [dataset[i] for i in order[: n_held]] if n_held else list(dataset)
    train = [dataset[i] for i in order[n_held:]] if n_held else list(dataset)

    rtg_scale = cfg.rtg_scale if cfg.rtg_scale is not None else default_rtg_scale(train)
    sampler = _WindowSampler(train)
    eval_sampler = _WindowSampler(held)
    eval_batch = eval_sampler.draw(eval_rng, cfg.eval_windows, cfg.context_length, rtg_scale)

    backbone = init_backbone(backbone_cfg, int(seeds[0] % 2**31))
    head = init_dt_head(d_s, d_a, backbone_cfg.d_model, int(seeds[1] % 2**31))
    params = head.trainable() + backbone.trainable()
    adam = AdamState()
    sched = LrSchedule(cfg.lr, cfg.warmup_steps)

    batches_per_epoch = max(1, -(-sampler.total_steps // (cfg.batch_size * cfg.context_length)))
    total = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    def evaluate() -> float:
        return float(dt_loss(head, backbone, eval_batch).data)

    log = TrainLog()
    first_eval = None
    for step in range(total):
        if step % cfg.eval_every == 0:
            val = evaluate()
            log.eval_steps.append(step)
            log.eval_mses.append(val)
            if first_eval is None:
                first_eval = val
        batch = sampler.draw(sampler_rng, cfg.batch_size, cfg.context_length, rtg_scale)
        if augment is not None:
            batch = augment(batch, step)
        for p in params:
            p.zero_grad()
        loss = dt_loss(head, backbone, batch, rng=dropout_rng)
        loss.backward()
        grads = [p.grad for p in params]
        clip_global_norm(grads, GRAD_CLIP)
        lr = sched.lr(step)
        adam_step(params, grads, adam, lr)
        log.steps.append(step)
        log.losses.append(float(loss.data))
        log.lrs.append(lr)
        if log_fn is not None:
            line = f"step {step} loss {format(log.losses[-1], '.17g')} lr {format(lr, '.17g')}"
            if log.eval_steps and log.eval_steps[-1] == step:
                line += f" heldout_mse {format(log.eval_mses[-1], '.17g')}"
            log_fn(line)
        if (
            cfg.stop_at_eval_frac is not None
            and log.eval_mses
            and first_eval is not None
            and log.eval_mses[-1] <= cfg.stop_at_eval_frac * first_eval
        ):
            break
    final_eval = evaluate()
    log.eval_steps.append(log.steps[-1] + 1 if log.steps else 0)
    log.eval_mses.append(final_eval)
    if log_fn is not None:
        log_fn(f"final heldout_mse {format(final_eval, '.17g')}")

    env_names = sorted({t.env_name for t in dataset})
    merged = {name: head[name].data for name in head.names()}
    merged.update({name: backbone[name].data for name in backbone.names()})
    ckpt = Checkpoint(
        params=merged,
        config=backbone_cfg,
        provenance="rl-pretrained",
        meta={
            "env_name": ",".join(env_names),
            "final_loss": format(log.losses[-1] if log.losses else float("nan"), ".17g"),
            "final_heldout_mse": format(final_eval, ".17g"),
            "steps": str(len(log.steps)),
            "d_s": str(d_s),
            "d_a": str(d_a),
            "context_length": str(cfg.context_length),
            "rtg_scale": format(rtg_scale, ".17g"),
            "seed": str(cfg.seed),
        },
    )
    return ckpt, log
