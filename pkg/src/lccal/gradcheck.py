"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def _scalar(out: Tensor, proj: np.ndarray) -> float:
    return float(np.sum(out.data * proj))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], n_coords: int = 100,
              h: float = 1e-4, seed: int = 0, floor: float = 1e-6) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar by
    a fixed random projection. ``n_coords`` input coordinates are drawn
    (with replacement when the inputs are smaller) and each is compared as
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in base]
    with Tape() as tape:
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        loss = (out * Tensor(proj)).sum()
    tape.backward(loss)
    sizes = np.array([x.size for x in base])
    total = int(sizes.sum())
    picks = rng.choice(total, size=n_coords, replace=total < n_coords)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[which])
        vals = []
        for step in (h, -h):
            args = [x.copy() for x in base]
            args[which].reshape(-1)[j] += step
            vals.append(_scalar(fn(*(Tensor(a) for a in args)), proj))
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        g = leaves[which].grad
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
