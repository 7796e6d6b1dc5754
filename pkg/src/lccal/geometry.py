"""Rotation and rigid-body transform algebra.

Conventions:
    - Quaternions are scalar-first ``(w, x, y, z)`` and canonicalized to
      ``w >= 0`` (ties broken by the first non-zero vector component).
    - Rotation matrices are plain ``(3, 3)`` float64 arrays acting on column
      vectors.
    - ``Transform(R, t)`` maps a point ``p`` to ``R @ p + t``.
    - Euler angles use ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, GimbalLockError, ValidationError

ORTHONORMAL_TOL = 1e-6
GIMBAL_MARGIN = 1e-3
_EPS_NORM = 1e-300


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, normalized and sign-canonicalized on construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        v = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        v = canonicalize_quat(v)
        for name, val in zip("wxyz", v):
            object.__setattr__(self, name, float(val))

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        return cls(*q)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __neg__(self):
        # -q is the same rotation; construction canonicalizes it back.
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


QuatLike = Union[Quaternion, Sequence[float], np.ndarray]


class EulerRPY(NamedTuple):
    roll: float
    pitch: float
    yaw: float


def _as_quat_array(q: QuatLike) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < _EPS_NORM:
        raise DegenerateInputError(f"quaternion has zero or non-finite norm: {q}")
    return q / n


def canonicalize_quat(q) -> np.ndarray:
    """Normalize ``q`` and flip its sign so the representation is unique."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < _EPS_NORM:
        raise DegenerateInputError(f"quaternion has zero or non-finite norm: {q}")
    q = q / n
    for c in q:
        if c != 0.0:
            return q if c > 0 else -q
    return q


def quat_to_rotmat(q: QuatLike) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion."""
    w, x, y, z = _as_quat_array(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def check_rotation(R, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValidationError("rotation has non-finite entries")
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise ValidationError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValidationError(f"rotation has det {det:.9f}, expected +1")
    return R


def project_to_rotation(M) -> np.ndarray:
    """Closest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotmat_to_quat(R) -> Quaternion:
    """Quaternion of a rotation matrix (Shepperd's branch selection)."""
    R = check_rotation(R)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return Quaternion(*q)


def angular_distance(q1: QuatLike, q2: QuatLike) -> float:
    """Rotation angle between two quaternions, ``2 * arccos(|<q1, q2>|)`` in ``[0, pi]``."""
    a = _as_quat_array(q1)
    b = _as_quat_array(q2)
    d = min(abs(float(np.dot(a, b))), 1.0)
    return 2.0 * math.acos(d)


def rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_rpy_to_rotmat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rz(yaw) @ ry(pitch) @ rx(roll)


def rotmat_to_euler_rpy(R) -> EulerRPY:
    """Decompose ``R = Rz(yaw) Ry(pitch) Rx(roll)``.

    Raises:
        GimbalLockError: if ``|pitch| >= pi/2 - 1e-3``, where roll and yaw
            are no longer separable.
    """
    R = check_rotation(R)
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    if abs(pitch) >= math.pi / 2 - GIMBAL_MARGIN:
        raise GimbalLockError(f"pitch {pitch:.6f} rad is within {GIMBAL_MARGIN} of gimbal lock")
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return EulerRPY(roll, pitch, yaw)


class Transform:
    """Rigid-body transform ``p -> R p + t``.

    Instances are treated as immutable values; the arrays are marked
    read-only.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, *, validate: bool = True):
        R = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64).reshape(3)
        if validate:
            check_rotation(R)
            if not np.all(np.isfinite(t)):
                raise ValidationError("translation has non-finite entries")
        R.setflags(write=False)
        t.setflags(write=False)
        self.rotation = R
        self.translation = t

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_matrix(cls, M, *, project: bool = False) -> "Transform":
        """Build from a ``4x4`` or ``3x4`` matrix; ``project`` snaps R onto SO(3)."""
        M = np.asarray(M, dtype=np.float64)
        if M.shape not in ((4, 4), (3, 4)):
            raise ValidationError(f"expected 3x4 or 4x4 matrix, got {M.shape}")
        R = M[:3, :3]
        if project:
            R = project_to_rotation(R)
        return cls(R, M[:3, 3])

    @classmethod
    def from_quat(cls, q: QuatLike, t=None) -> "Transform":
        return cls(quat_to_rotmat(q), t)

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, t=None) -> "Transform":
        return cls(euler_rpy_to_rotmat(roll, pitch, yaw), t)

    @classmethod
    def from_text(cls, text: str) -> "Transform":
        vals = text.split()
        if len(vals) != 12:
            raise ValidationError(f"transform text needs 12 values, got {len(vals)}")
        return cls.from_matrix(np.array([float(v) for v in vals]).reshape(3, 4))

    def to_text(self) -> str:
        """Row-major ``[R|t]`` as 12 space-separated decimals (KITTI calib layout)."""
        return " ".join(f"{v:.17g}" for v in self.as_matrix()[:3].ravel())

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def quaternion(self) -> Quaternion:
        return rotmat_to_quat(self.rotation)

    def compose(self, other: "Transform") -> "Transform":
        return se3_compose(self, other)

    def inverse(self) -> "Transform":
        return se3_inverse(self)

    def apply(self, pts) -> np.ndarray:
        return se3_apply(self, pts)

    def __matmul__(self, other):
        if isinstance(other, Transform):
            return se3_compose(self, other)
        return NotImplemented

    def __eq__(self, other):
        if not isinstance(other, Transform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def allclose(self, other: "Transform", atol: float = 1e-9) -> bool:
        return max_abs_diff(self, other) <= atol

    def __repr__(self):
        return f"Transform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def max_abs_diff(a: Transform, b: Transform) -> float:
    """Largest difference over the 12 free entries of two transforms."""
    return float(max(np.max(np.abs(a.rotation - b.rotation)),
                     np.max(np.abs(a.translation - b.translation))))


def se3_compose(a: Transform, b: Transform) -> Transform:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation,
                     validate=False)


def se3_inverse(T: Transform) -> Transform:
    Rt = T.rotation.T
    return Transform(Rt, -Rt @ T.translation, validate=False)


def se3_apply(T: Transform, pts) -> np.ndarray:
    """Apply ``T`` to an ``(N, 3)`` array (or a single 3-vector)."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        return T.rotation @ pts + T.translation
    return pts @ T.rotation.T + T.translation
