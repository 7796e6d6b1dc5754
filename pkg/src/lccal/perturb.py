"""Random miscalibration sampling for building training pairs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Mapping, Optional

import numpy as np

from .errors import ValidationError
from .geometry import Transform, euler_rpy_to_rotmat, se3_compose

# Shrinking ranges used by the multi-range cascade, largest first.
CASCADE_RANGES_M_DEG = ((1.5, 20.0), (1.0, 10.0), (0.5, 5.0), (0.2, 2.0), (0.1, 1.0))


@dataclass(frozen=True)
class RangeSpec:
    """Per-axis bounds: translation in meters, rotation in radians."""

    max_translation: float
    max_rotation: float

    def __post_init__(self):
        if not (self.max_translation >= 0 and self.max_rotation >= 0):
            raise ValidationError(f"range bounds must be >= 0, got {self}")

    @classmethod
    def from_degrees(cls, max_translation: float, max_rotation_deg: float) -> "RangeSpec":
        return cls(float(max_translation), math.radians(max_rotation_deg))

    @classmethod
    def parse(cls, text: str) -> "RangeSpec":
        """Parse ``"<meters>:<degrees>"``, e.g. ``"1.5:20"``."""
        try:
            t, r = text.split(":")
            return cls.from_degrees(float(t), float(r))
        except ValueError as exc:
            raise ValidationError(f"range must look like '<t_m>:<r_deg>', got {text!r}") from exc

    @property
    def max_rotation_deg(self) -> float:
        return math.degrees(self.max_rotation)

    def __str__(self):
        return f"{self.max_translation:g}m/{self.max_rotation_deg:g}deg"


CASCADE_RANGES = tuple(RangeSpec.from_degrees(t, r) for t, r in CASCADE_RANGES_M_DEG)


@dataclass(frozen=True)
class DeviationSample:
    delta: Transform
    seed: int
    translation: tuple
    euler: tuple  # (roll, pitch, yaw) radians


def derive_seed(base: int, *keys: int) -> int:
    """Independent 63-bit seed for a ``(base, epoch, frame, ...)`` stream."""
    ss = np.random.SeedSequence([int(base), *(int(k) for k in keys)])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def sample_deviation(rng_range: RangeSpec, rng_seed: int) -> DeviationSample:
    """Draw a deviation with i.i.d. uniform translation and Euler components.

    The rotation is ``Rz(yaw) Ry(pitch) Rx(roll)`` with each angle uniform in
    ``[-max_rotation, max_rotation]``.
    """
    rng = np.random.default_rng(rng_seed)
    t = rng.uniform(-rng_range.max_translation, rng_range.max_translation, size=3)
    roll, pitch, yaw = rng.uniform(-rng_range.max_rotation, rng_range.max_rotation, size=3)
    delta = Transform(euler_rpy_to_rotmat(roll, pitch, yaw), t, validate=False)
    return DeviationSample(delta, int(rng_seed), tuple(float(x) for x in t),
                           (float(roll), float(pitch), float(yaw)))


def make_initial_extrinsic(gt: Transform, delta: Transform) -> Transform:
    """Miscalibrated extrinsic ``delta @ gt``."""
    return se3_compose(delta, gt)


CSV_HEADER = ["seed", "tx_m", "ty_m", "tz_m", "roll_rad", "pitch_rad", "yaw_rad"]


def write_deviations_csv(path, samples: Iterable[DeviationSample],
                         meta: Optional[Mapping[str, object]] = None) -> None:
    """One row per sample; ``meta`` goes in leading ``# key=value`` lines."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        for k, v in (meta or {}).items():
            f.write(f"# {k}={v}\n")
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow([s.seed, *(repr(v) for v in s.translation), *(repr(v) for v in s.euler)])
    os.replace(tmp, path)


def read_deviations_csv(path) -> List[DeviationSample]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(line for line in f if not line.startswith("#")):
            t = tuple(float(row[k]) for k in CSV_HEADER[1:4])
            e = tuple(float(row[k]) for k in CSV_HEADER[4:7])
            delta = Transform(euler_rpy_to_rotmat(*e), t, validate=False)
            out.append(DeviationSample(delta, int(row["seed"]), t, e))
    return out
