"""Calibration error metrics and their table-style aggregation."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import astuple, dataclass
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np

from ..geometry import Transform, angular_distance, rotmat_to_euler_rpy, rotmat_to_quat

COLUMNS = ("E_t", "X", "Y", "Z", "E_R", "Roll", "Pitch", "Yaw")
STATS = ("Mean", "Median", "Std")


@dataclass(frozen=True)
class ErrorReport:
    """Per-frame errors: translations in cm, rotations in degrees."""

    E_t: float
    X: float
    Y: float
    Z: float
    E_R: float
    Roll: float
    Pitch: float
    Yaw: float

    def as_row(self) -> List[float]:
        return list(astuple(self))


def evaluate(pred: Transform, gt: Transform) -> ErrorReport:
    """Compare a predicted extrinsic against ground truth.

    ``E_t`` is ``||t_pred - t_gt||``; X/Y/Z are per-axis absolute
    differences. ``E_R`` is the quaternion angular distance. Roll/pitch/yaw
    are the absolute Euler angles of the residual rotation
    ``R_pred R_gt^T``, which stays well defined even when the extrinsics
    themselves sit at a gimbal-lock orientation (as the usual LiDAR -> camera
    axis permutation does).
    """
    dt = pred.translation - gt.translation
    e_t = float(np.linalg.norm(dt))
    e_r = angular_distance(rotmat_to_quat(pred.rotation), rotmat_to_quat(gt.rotation))
    rpy = rotmat_to_euler_rpy(pred.rotation @ gt.rotation.T)
    return ErrorReport(100.0 * e_t, *(100.0 * abs(float(v)) for v in dt),
                       math.degrees(e_r), *(abs(math.degrees(a)) for a in rpy))


def aggregate(reports: Iterable[ErrorReport]) -> Dict[str, Dict[str, float]]:
    """Mean / median / (population) std of each column."""
    arr = np.array([r.as_row() for r in reports], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no error reports to aggregate")
    funcs = {"Mean": np.mean, "Median": np.median, "Std": np.std}
    return {s: dict(zip(COLUMNS, (float(v) for v in f(arr, axis=0)))) for s, f in funcs.items()}


def write_error_csv(path, reports: List[ErrorReport], meta: Optional[Mapping[str, object]] = None,
                    per_frame: bool = False) -> None:
    """Write Mean/Median/Std rows (optionally per-frame rows too) under the table header.

    ``meta`` entries are written as leading ``# key=value`` comment lines.
    """
    agg = aggregate(reports)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        for k, v in (meta or {}).items():
            f.write(f"# {k}={v}\n")
        w = csv.writer(f)
        w.writerow(["Stat", *COLUMNS])
        for s in STATS:
            w.writerow([s, *(f"{agg[s][c]:.6f}" for c in COLUMNS)])
        if per_frame:
            for i, r in enumerate(reports):
                w.writerow([f"frame{i}", *(f"{v:.6f}" for v in r.as_row())])
    os.replace(tmp, path)


def read_error_csv(path) -> Dict[str, Dict[str, float]]:
    out = {}
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    header = rows[0]
    for row in rows[1:]:
        out[row[0]] = {c: float(v) for c, v in zip(header[1:], row[1:])}
    return out
