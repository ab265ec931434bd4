"""Central finite-difference gradient oracle, independent of the tape.

Only forward evaluations are used, so this stays a genuine second route
against the analytic backward pass.
"""

from __future__ import annotations

import numpy as np

from trajgpt.tensor import Tensor


def numeric_grad(loss_fn, param: Tensor, h_base: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. param.data, one coordinate at a time.

    `coords` optionally restricts to a subset of flat indices (grad entries
    outside it are returned as nan and must be skipped by the caller).
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        h = h_base * (1.0 + abs(orig))
        flat[i] = orig + h
        f_plus = float(loss_fn().data)
        flat[i] = orig - h
        f_minus = float(loss_fn().data)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out.reshape(param.data.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case per-coordinate relative error with an absolute floor for near-zero grads."""
    mask = ~np.isnan(numeric)
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn, params: list[Tensor], rtol: float, h_base: float = 1e-6,
                    max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Build the loss once, backprop, and compare every param grad to central differences.

    Returns the worst relative error seen. With `max_coords`, a random subset
    of coordinates per parameter is checked (for larger models).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            assert rng is not None
            coords = rng.choice(p.data.size, size=max_coords, replace=False)
        num = numeric_grad(loss_fn, p, h_base=h_base, coords=coords)
        err = rel_err(p.grad, num)
        worst = max(worst, err)
        assert err <= rtol, f"gradient mismatch: rel err {err:.3e} > {rtol:.0e} on shape {p.data.shape}"
    return worst
