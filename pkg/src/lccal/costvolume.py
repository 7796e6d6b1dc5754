"""Local correlation cost volume between RGB and depth feature maps."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, as_tensor, make_op


def displacements(d: int) -> List[Tuple[int, int]]:
    """``(dy, dx)`` offsets in slot order: row-major over ``dy``, then ``dx``."""
    return [(dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]


def correlation(x_rgb, x_lidar, d: int = 2) -> Tensor:
    """Correlate features over an infinity-norm window of radius ``d``.

    For every pixel ``p`` and offset ``delta`` with ``|delta|_inf <= d``::

        out[k, p] = (1 / C) * sum_c x_rgb[c, p] * x_lidar[c, p + delta]

    where ``k`` is the slot of ``delta`` in :func:`displacements`. Offsets that
    leave the map contribute exactly 0.

    Args:
        x_rgb: ``(C, H, W)`` or ``(N, C, H, W)`` features.
        x_lidar: same shape as ``x_rgb``.
        d: search radius, ``>= 0``.

    Returns:
        Tensor of shape ``((2d+1)**2, H, W)``, or ``(N, (2d+1)**2, H, W)`` for
        batched input.
    """
    a = as_tensor(x_rgb)
    b = as_tensor(x_lidar)
    if a.shape != b.shape:
        raise ShapeError(f"correlation: rgb features {a.shape} vs lidar features {b.shape}")
    if a.ndim not in (3, 4):
        raise ShapeError(f"correlation: expected (C,H,W) or (N,C,H,W), got {a.shape}")
    d = int(d)
    if d < 0:
        raise ValidationError(f"correlation radius must be >= 0, got {d}")
    batched = a.ndim == 4
    A = a.data if batched else a.data[None]
    B = b.data if batched else b.data[None]
    N, C, H, W = A.shape
    offs = displacements(d)
    Bp = np.pad(B, ((0, 0), (0, 0), (d, d), (d, d)))
    out = np.empty((N, len(offs), H, W))
    for k, (dy, dx) in enumerate(offs):
        win = Bp[:, :, d + dy:d + dy + H, d + dx:d + dx + W]
        out[:, k] = np.einsum("nchw,nchw->nhw", A, win) / C

    def vjp(g):
        g = g if batched else g[None]
        ga = np.zeros_like(A)
        gbp = np.zeros_like(Bp)
        for k, (dy, dx) in enumerate(offs):
            gk = g[:, k:k + 1] / C
            ys = slice(d + dy, d + dy + H)
            xs = slice(d + dx, d + dx + W)
            ga += gk * Bp[:, :, ys, xs]
            gbp[:, :, ys, xs] += gk * A
        gb = gbp[:, :, d:d + H, d:d + W]
        if not batched:
            ga, gb = ga[0], gb[0]
        return ga, gb

    return make_op(out if batched else out[0], (a, b), vjp)


def slice_image(cv, k: int) -> np.ndarray:
    """One displacement slot of an unbatched cost volume scaled to 8-bit grayscale."""
    data = cv.data if isinstance(cv, Tensor) else np.asarray(cv)
    s = data[k]
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.round(255.0 * (s - lo) / (hi - lo)).astype(np.uint8)
