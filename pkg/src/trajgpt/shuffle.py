"""Trajectory-token shuffling ablations over DTBatch windows.

inner: permute timestep order within each modality stream; the (R, s, a)
slot pattern is untouched and timestep embeddings stay anchored to slots.
inter: permute which modality occupies which slot inside each step's triple;
every stream keeps its temporal order. inner-inter composes the two with
sub-seeds split off the spec seed. All transforms are pure and deterministic
per (batch, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dt import DTBatch

MODES = ("none", "inner", "inter", "inner-inter")
STREAMS = ("returns", "states", "actions")


@dataclass(frozen=True)
class ShuffleSpec:
    mode: str = "none"
    seed: int = 0
    # keep one modality's slot fixed during inter-shuffle (None: permute all three)
    fixed_modality: str | None = None
    # testing hook: 'returns'/'states'/'actions' -> (K,) permutations, 'slots' -> (K, 3)
    explicit_permutations: dict | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fixed_modality is not None and self.fixed_modality not in STREAMS:
            raise ValueError(f"fixed_modality must be one of {STREAMS}, got {self.fixed_modality!r}")


def _validate_perm(perm: np.ndarray, n: int, what: str) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"{what} is not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm


def _copy(batch: DTBatch) -> DTBatch:
    return DTBatch(
        batch.returns_to_go.copy(),
        batch.states.copy(),
        batch.actions.copy(),
        batch.timesteps.copy(),
        batch.mask.copy(),
        None if batch.slot_order is None else batch.slot_order.copy(),
    )


def _require_fully_real(batch: DTBatch) -> None:
    if not batch.mask.all():
        raise ValueError("explicit permutations require a batch with no padded positions")


def inner_shuffle(batch: DTBatch, spec: ShuffleSpec) -> DTBatch:
    """Permute each modality stream's contents across its masked-in timesteps,
    independently per sample and per stream. Timesteps, mask, and slot layout
    stay put, so position/timestep embeddings keep their slots.
    """
    out = _copy(batch)
    contents = {"returns": out.returns_to_go, "states": out.states, "actions": out.actions}
    k = batch.context_length
    if spec.explicit_permutations is not None:
        _require_fully_real(batch)
        for name in STREAMS:
            if name in spec.explicit_permutations:
                perm = _validate_perm(spec.explicit_permutations[name], k, f"{name} permutation")
                contents[name][:] = contents[name][:, perm]
        return out
    rng = np.random.default_rng(spec.seed)
    for b in range(batch.batch_size):
        real = np.flatnonzero(batch.mask[b])
        for name in STREAMS:
            perm = rng.permutation(real.size)
            contents[name][b, real] = contents[name][b, real[perm]]
    return out


def _slot_orders_identity(batch: DTBatch) -> np.ndarray:
    return np.broadcast_to(np.arange(3), (batch.batch_size, batch.context_length, 3)).copy()


def _compose_slot_order(old: np.ndarray | None, new: np.ndarray, batch: DTBatch) -> np.ndarray | None:
    combined = new if old is None else np.take_along_axis(old, new, axis=2)
    if np.array_equal(combined, _slot_orders_identity(batch)):
        return None
    return combined


def inter_shuffle(batch: DTBatch, spec: ShuffleSpec) -> DTBatch:
    """Permute modality-to-slot assignment within each masked-in step's triple,
    independently per sample and step. Stream contents never move, so each
    modality's temporal order is preserved by construction.
    """
    out = _copy(batch)
    k = batch.context_length
    if spec.explicit_permutations is not None:
        _require_fully_real(batch)
        orders = np.asarray(spec.explicit_permutations["slots"], dtype=np.int64)
        if orders.shape != (k, 3):
            raise ValueError(f"slots must be (K, 3) = ({k}, 3), got {orders.shape}")
        for t in range(k):
            _validate_perm(orders[t], 3, f"slot triple at step {t}")
        new = np.broadcast_to(orders, (batch.batch_size, k, 3)).copy()
        out.slot_order = _compose_slot_order(batch.slot_order, new, batch)
        return out

    rng = np.random.default_rng(spec.seed)
    new = _slot_orders_identity(batch)
    if spec.fixed_modality is None:
        for b in range(batch.batch_size):
            for t in np.flatnonzero(batch.mask[b]):
                new[b, t] = rng.permutation(3)
    else:
        fixed = STREAMS.index(spec.fixed_modality)
        movable = [i for i in range(3) if i != fixed]
        for b in range(batch.batch_size):
            for t in np.flatnonzero(batch.mask[b]):
                if rng.integers(2):
                    new[b, t, movable[0]], new[b, t, movable[1]] = movable[1], movable[0]
    out.slot_order = _compose_slot_order(batch.slot_order, new, batch)
    return out


def derive_subseeds(seed: int) -> tuple[int, int]:
    inner_seed, inter_seed = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    return int(inner_seed), int(inter_seed)


def inner_inter_shuffle(batch: DTBatch, spec: ShuffleSpec) -> DTBatch:
    """inner_shuffle then inter_shuffle under independent sub-seeds."""
    if spec.explicit_permutations is not None:
        stage1 = inner_shuffle(batch, spec)
        return inter_shuffle(stage1, spec) if "slots" in spec.explicit_permutations else stage1
    inner_seed, inter_seed = derive_subseeds(spec.seed)
    stage1 = inner_shuffle(batch, replace(spec, seed=inner_seed))
    return inter_shuffle(stage1, replace(spec, seed=inter_seed))


def apply_shuffle(batch: DTBatch, spec: ShuffleSpec) -> DTBatch:
    if spec.mode == "none":
        return batch
    if spec.mode == "inner":
        return inner_shuffle(batch, spec)
    if spec.mode == "inter":
        return inter_shuffle(batch, spec)
    return inner_inter_shuffle(batch, spec)


def batch_augmenter(spec: ShuffleSpec) -> Callable[[DTBatch, int], DTBatch] | None:
    """Per-training-batch application with a fresh seed folded from (spec.seed, step),
    so every batch sees new permutations while runs stay reproducible.
    """
    if spec.mode == "none":
        return None

    def apply(batch: DTBatch, step: int) -> DTBatch:
        step_seed = int(np.random.SeedSequence((spec.seed, step)).generate_state(1, np.uint64)[0])
        return apply_shuffle(batch, replace(spec, seed=step_seed))

    return apply


def materialize_tokens(batch: DTBatch) -> list[list[tuple[str, np.ndarray]]]:
    """Render each sample as its 3K-slot token sequence of (modality, value)
    pairs with slot_order applied; padded steps are included (mask tells which).
    """
    order = batch.slot_order if batch.slot_order is not None else _slot_orders_identity(batch)
    out = []
    for b in range(batch.batch_size):
        row = []
        for t in range(batch.context_length):
            step = (
                np.atleast_1d(batch.returns_to_go[b, t]),
                batch.states[b, t],
                batch.actions[b, t],
            )
            for j in range(3):
                m = int(order[b, t, j])
                row.append((STREAMS[m], step[m].copy()))
        out.append(row)
    return out
