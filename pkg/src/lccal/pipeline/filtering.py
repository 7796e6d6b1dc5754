"""Multi-frame median filtering of calibration estimates."""

from __future__ import annotations

from typing import List, Sequence, Union

import numpy as np

from ..geometry import Transform, euler_rpy_to_rotmat, project_to_rotation, rotmat_to_euler_rpy
from .cascade import CalibrationEstimate

EstimateLike = Union[CalibrationEstimate, Transform]


def _transform(e: EstimateLike) -> Transform:
    return e.T_LC_hat if isinstance(e, CalibrationEstimate) else e


def reference_rotation(rotations: Sequence[np.ndarray]) -> np.ndarray:
    """Chordal mean: the rotation closest to the element-wise average matrix."""
    return project_to_rotation(np.mean(np.stack(rotations), axis=0))


def median_components(estimates: Sequence[EstimateLike]):
    """Translations and reference-relative ``(roll, pitch, yaw)`` as arrays, plus the reference."""
    Ts = [_transform(e) for e in estimates]
    ref = reference_rotation([T.rotation for T in Ts])
    trans = np.array([T.translation for T in Ts])
    rpy = np.array([rotmat_to_euler_rpy(T.rotation @ ref.T) for T in Ts])
    return trans, rpy, ref


def temporal_filter(estimates: Sequence[EstimateLike]) -> Transform:
    """Component-wise median over frames.

    Translations use a per-axis median. Rotations are expressed as Euler
    angles of ``R_i R_ref^T`` around the chordal-mean rotation ``R_ref``
    (order-independent, and keeps the decomposition away from gimbal lock
    for extrinsics such as the LiDAR -> camera axis permutation), medianed per
    angle and recomposed.
    """
    if len(estimates) == 0:
        raise ValueError("temporal_filter needs at least one estimate")
    if len(estimates) == 1:
        return _transform(estimates[0])
    trans, rpy, ref = median_components(estimates)
    t = np.median(trans, axis=0)
    roll, pitch, yaw = np.median(rpy, axis=0)
    return Transform(euler_rpy_to_rotmat(roll, pitch, yaw) @ ref, t, validate=False)


def sliding_filter(estimates: Sequence[EstimateLike], window: int) -> List[Transform]:
    """Trailing-window :func:`temporal_filter` for every frame (shorter windows at the start)."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return [temporal_filter(estimates[max(0, i - window + 1): i + 1]) for i in range(len(estimates))]
