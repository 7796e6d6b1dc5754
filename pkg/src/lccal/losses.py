"""Training objective: smooth-L1 translation loss, quaternion angular distance,
point-cloud distance loss and their weighted combination.

Every loss returns a scalar :class:`~lccal.tensor.Tensor` so it can be
backpropagated; call ``float()`` on it for a plain value.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ValidationError
from .geometry import Transform
from .projection import _points
from .tensor import Tensor

ARCCOS_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class LossWeights:
    trans_reg: float = 1.0   # lambda_T
    point: float = 0.5       # lambda_P
    trans: float = 1.0       # lambda_t
    rot: float = 1.0         # lambda_q

    def __post_init__(self):
        vals = (self.trans_reg, self.point, self.trans, self.rot)
        if any(v < 0 for v in vals):
            raise ValidationError(f"loss weights must be >= 0, got {self}")
        if not any(v > 0 for v in vals):
            raise ValidationError("at least one loss weight must be positive")


def smooth_l1(t_pred, t_gt) -> Tensor:
    """Mean over components of ``0.5 x^2`` (``|x| < 1``) or ``|x| - 0.5``."""
    t_pred = T.as_tensor(t_pred)
    gt = np.asarray(t_gt.data if isinstance(t_gt, Tensor) else t_gt, dtype=np.float64)
    if gt.shape != t_pred.shape:
        raise ValidationError(f"smooth_l1: prediction {t_pred.shape} vs target {gt.shape}")
    return T.mean(T.huber(T.sub(t_pred, Tensor(gt)), 1.0))


def _rows(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else T.reshape(x, (1, x.shape[-1]))


def rotation_loss(q_gt, q_pred) -> Tensor:
    """Angular distance ``2 arccos(|<q_gt, q_pred>|)``, averaged over a batch.

    Both quaternions are normalized inside the loss, and ``|<.,.>|`` is
    clamped to ``1 - 1e-12`` so the gradient stays finite at coincidence.
    """
    q_pred = _rows(T.as_tensor(q_pred))
    gt = np.asarray(q_gt.data if isinstance(q_gt, Tensor) else q_gt, dtype=np.float64).reshape(-1, 4)
    if gt.shape != q_pred.shape:
        raise ValidationError(f"rotation_loss: target {gt.shape} vs prediction {q_pred.shape}")
    gn = np.linalg.norm(gt, axis=1)
    if np.any(gn < 1e-300) or np.any(np.linalg.norm(q_pred.data, axis=1) < 1e-300):
        raise DegenerateInputError("rotation_loss: zero-norm quaternion")
    gt = gt / gn[:, None]
    B = q_pred.shape[0]
    pn = T.expand(T.reshape(T.norm(q_pred, axis=1), (B, 1)), (B, 4))
    dot = T.sum_(T.mul(T.div(q_pred, pn), Tensor(gt)), axis=1)
    cos = T.clip(T.abs_(dot), -1.0, ARCCOS_CLAMP)
    return T.mean(T.mul(T.arccos(cos), 2.0))


def regression_loss(t_pred, q_pred, t_gt, q_gt, w: LossWeights = LossWeights()) -> Tensor:
    return T.add(T.mul(smooth_l1(t_pred, t_gt), w.trans), T.mul(rotation_loss(q_gt, q_pred), w.rot))


def quat_to_rotmat_tensor(q: Tensor) -> Tensor:
    """Differentiable rotation matrix of a unit quaternion ``(4,)`` (or ``(B, 4)`` -> ``(B, 3, 3)``)."""
    q = T.as_tensor(q)
    batched = q.ndim == 2
    qq = q if batched else T.reshape(q, (1, 4))
    w, x, y, z = (qq[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ]
    R = T.stack([T.stack(r, axis=1) for r in rows], axis=1)
    return R if batched else T.reshape(R, (3, 3))


PredLike = Union[Transform, Tuple[Tensor, Tensor]]


def point_cloud_loss(cloud, T_LC: Transform, T_pred: PredLike, T_init: Transform) -> Tensor:
    """Mean distance each point moves under ``T_LC^-1 T_pred^-1 T_init``.

    ``T_pred`` is either a fixed :class:`Transform` or a differentiable
    ``(t, q)`` pair of tensors with ``q`` unit-norm.
    """
    P = _points(cloud)
    if len(P) == 0:
        raise DegenerateInputError("point_cloud_loss: empty point cloud")
    if isinstance(T_pred, Transform):
        R = Tensor(T_pred.rotation)
        t = Tensor(T_pred.translation)
    else:
        t, q = T_pred
        t = T.reshape(T.as_tensor(t), (3,))
        R = quat_to_rotmat_tensor(T.reshape(T.as_tensor(q), (4,)))
    N = len(P)
    # Rows are points: x_row @ R == (R^T x)^T, so (Q - t) @ R applies T_pred^-1.
    Q = Tensor(P @ T_init.rotation.T + T_init.translation)
    shifted = T.sub(Q, T.expand(T.reshape(t, (1, 3)), (N, 3)))
    cam = T.matmul(shifted, R)
    lc_inv = T_LC.inverse()
    back = T.add(T.matmul(cam, Tensor(lc_inv.rotation.T)),
                 Tensor(lc_inv.translation - P))
    return T.mean(T.norm(back, axis=1))


def total_loss(t_pred: Tensor, q_pred: Tensor, t_gt, q_gt, clouds: Sequence, T_LCs: Sequence[Transform],
               T_inits: Sequence[Transform], w: LossWeights = LossWeights()) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted training loss over a batch plus its components.

    ``t_pred`` / ``q_pred`` are ``(B, 3)`` / ``(B, 4)`` (or unbatched); the
    remaining sequences hold one entry per sample. The point-cloud term is
    the mean of the per-sample losses. Components are returned as floats
    under ``L_t``, ``L_R``, ``L_P``, ``L``.
    """
    t_pred = _rows(T.as_tensor(t_pred))
    q_pred = _rows(T.as_tensor(q_pred))
    t_gt = np.asarray(t_gt, dtype=np.float64).reshape(-1, 3)
    q_gt = np.asarray(q_gt, dtype=np.float64).reshape(-1, 4)
    B = t_pred.shape[0]
    if not (len(clouds) == len(T_LCs) == len(T_inits) == B):
        raise ValidationError(f"total_loss: batch of {B} predictions but {len(clouds)} clouds, "
                              f"{len(T_LCs)} ground truths, {len(T_inits)} initial extrinsics")
    l_t = smooth_l1(t_pred, t_gt)
    l_r = rotation_loss(q_gt, q_pred)
    l_reg = T.add(T.mul(l_t, w.trans), T.mul(l_r, w.rot))
    if w.point > 0:
        per = [point_cloud_loss(clouds[b], T_LCs[b], (t_pred[b], q_pred[b]), T_inits[b]) for b in range(B)]
        l_p = T.mean(T.stack(per))
    else:
        l_p = Tensor(0.0)
    total = T.add(T.mul(l_reg, w.trans_reg), T.mul(l_p, w.point))
    parts = {"L_t": float(l_t), "L_R": float(l_r), "L_P": float(l_p), "L": float(total)}
    return total, parts


LOSS_CSV_HEADER = ["step", "L_t", "L_R", "L_P", "L"]


class LossLog:
    """Appends per-step loss components to a CSV file."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.rows: List[Dict[str, float]] = []
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(LOSS_CSV_HEADER)

    def append(self, step: int, parts: Dict[str, float]) -> None:
        row = {"step": step, **parts}
        self.rows.append(row)
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step] + [repr(parts[k]) for k in LOSS_CSV_HEADER[1:]])
