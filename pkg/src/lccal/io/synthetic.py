"""Procedural scenes of planes and boxes for desk-scale experiments.

Geometry is stored in the LiDAR frame. The LiDAR cloud is drawn uniformly
over the primitive surfaces; the camera image is ray cast from the same
geometry through ``T_LC`` with per-primitive albedo and depth shading, so
both modalities see the same edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ValidationError
from ..geometry import Transform, ry
from ..perturb import derive_seed
from ..projection import CameraIntrinsics, PointCloud
from .frame import Frame

# Velodyne (x fwd, y left, z up) -> camera (x right, y down, z fwd) with a small lever arm.
KITTI_LIKE_T_LC = Transform(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
                            [0.02, -0.08, -0.27])
DEFAULT_INTRINSICS = CameraIntrinsics(100.0, 100.0, 64.0, 32.0, 128, 64)
BACKGROUND = (0.08, 0.08, 0.1)


@dataclass
class Primitive:
    """A rectangle (``kind="plane"``, local z = normal) or a box, posed in the LiDAR frame.

    ``extent`` holds half-sizes: ``(hx, hy)`` for planes, ``(hx, hy, hz)`` for boxes.
    """

    kind: str
    pose: Transform
    extent: Tuple[float, ...]
    albedo: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        need = {"plane": 2, "box": 3}.get(self.kind)
        if need is None:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        self.extent = tuple(float(e) for e in self.extent)
        if len(self.extent) != need or any(e <= 0 for e in self.extent):
            raise ValidationError(f"{self.kind} needs {need} positive half-extents, got {self.extent}")
        self.albedo = tuple(float(a) for a in self.albedo)

    def faces(self) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray, float, float]]:
        """Rectangles as ``(center, u_axis, v_axis, half_u, half_v)``."""
        R, t = self.pose.rotation, self.pose.translation
        if self.kind == "plane":
            return [(t.copy(), R[:, 0], R[:, 1], self.extent[0], self.extent[1])]
        out = []
        for k in range(3):
            a, b = [i for i in range(3) if i != k]
            for s in (-1.0, 1.0):
                out.append((t + s * self.extent[k] * R[:, k], R[:, a], R[:, b],
                            self.extent[a], self.extent[b]))
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pose": self.pose.to_text(), "extent": list(self.extent),
                "albedo": list(self.albedo)}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["kind"], Transform.from_text(d["pose"]), tuple(d["extent"]), tuple(d["albedo"]))


@dataclass
class SceneSpec:
    primitives: List[Primitive]
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    T_LC: Transform = KITTI_LIKE_T_LC
    n_points: int = 6000

    def to_json(self, seed: int) -> str:
        return json.dumps({
            "version": 1,
            "seed": int(seed),
            "n_points": self.n_points,
            "intrinsics": self.intrinsics.to_dict(),
            "T_LC": self.T_LC.to_text(),
            "primitives": [p.to_dict() for p in self.primitives],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> Tuple["SceneSpec", int]:
        d = json.loads(text)
        spec = cls([Primitive.from_dict(p) for p in d["primitives"]], CameraIntrinsics(**d["intrinsics"]),
                   Transform.from_text(d["T_LC"]), int(d["n_points"]))
        return spec, int(d["seed"])


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    cloud: PointCloud
    image: np.ndarray
    face_index: np.ndarray = field(repr=False)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    @property
    def T_LC(self) -> Transform:
        return self.spec.T_LC

    def as_frame(self) -> Frame:
        return Frame(self.image, self.cloud, self.spec.intrinsics, self.spec.T_LC, f"synthetic-{self.seed}")


def _all_faces(prims: Sequence[Primitive]):
    faces, owner = [], []
    for i, p in enumerate(prims):
        for f in p.faces():
            faces.append(f)
            owner.append(i)
    return faces, np.array(owner)


def sample_surface(prims: Sequence[Primitive], n: int, rng: np.random.Generator):
    """Area-uniform samples over all faces; returns points and the face each came from."""
    faces, _ = _all_faces(prims)
    areas = np.array([4.0 * hu * hv for _, _, _, hu, hv in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    ab = rng.uniform(-1.0, 1.0, size=(n, 2))
    C = np.array([f[0] for f in faces])
    U = np.array([f[1] * f[3] for f in faces])
    V = np.array([f[2] * f[4] for f in faces])
    pts = C[which] + ab[:, :1] * U[which] + ab[:, 1:] * V[which]
    return pts, which


def render_image(prims: Sequence[Primitive], k: CameraIntrinsics, T_LC: Transform) -> np.ndarray:
    """Ray cast an 8-bit RGB image of the primitives as seen through ``T_LC``."""
    faces, owner = _all_faces(prims)
    vv, uu = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    dirs = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    best = np.full(len(dirs), np.inf)
    shade = np.zeros((len(dirs), 3))
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    R, t = T_LC.rotation, T_LC.translation
    for (c, u, v, hu, hv), i in zip(faces, owner):
        c, u, v = R @ c + t, R @ u, R @ v
        n = np.cross(u, v)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (c @ n) / denom
            hit = dirs * z[:, None] - c
            ok = (np.abs(denom) > 1e-12) & (z > 1e-6) & (np.abs(hit @ u) <= hu) & (np.abs(hit @ v) <= hv) & (z < best)
        best[ok] = z[ok]
        lambert = 0.35 + 0.65 * np.abs(unit[ok] @ n)
        falloff = 1.0 / (1.0 + 0.04 * z[ok])
        shade[ok] = np.outer(lambert * falloff, prims[i].albedo)
    shade[np.isinf(best)] = BACKGROUND
    return np.round(255.0 * np.clip(shade, 0.0, 1.0)).reshape(k.height, k.width, 3).astype(np.uint8)


def generate_synthetic_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    if not spec.primitives:
        raise ValidationError("scene spec has no primitives")
    rng = np.random.default_rng(seed)
    pts, which = sample_surface(spec.primitives, spec.n_points, rng)
    _, owner = _all_faces(spec.primitives)
    albedo = np.array([p.albedo for p in spec.primitives]).mean(axis=1)
    cloud = PointCloud(pts, albedo[owner[which]])
    image = render_image(spec.primitives, spec.intrinsics, spec.T_LC)
    return SyntheticScene(spec, int(seed), cloud, image, which)


def _pose_cam(R_cam, center_cam, T_LC: Transform) -> Transform:
    """Primitive pose given in the camera frame, re-expressed in the LiDAR frame."""
    return T_LC.inverse() @ Transform(R_cam, center_cam)


def random_scene_spec(seed: int, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                      T_LC: Transform = KITTI_LIKE_T_LC, n_primitives: Tuple[int, int] = (4, 8),
                      n_points: Tuple[int, int] = (4000, 8000),
                      object_depth: Tuple[float, float] = (4.0, 13.0),
                      wall_depth: Tuple[float, float] = (14.0, 18.0)) -> SceneSpec:
    """Street-like layout: ground, back wall, and boxes / panels in front of the camera.

    Depth ranges are camera-frame z in meters.
    """
    rng = np.random.default_rng(seed)
    lo, hi = n_primitives
    count = int(rng.integers(lo, hi + 1))
    ground_y = rng.uniform(1.4, 1.8)
    wall_z = rng.uniform(*wall_depth)
    # Camera frame: x right, y down, z forward. Plane local z is its normal.
    to_ground = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    prims = [
        Primitive("plane", _pose_cam(to_ground, [0.0, ground_y, 0.5 * wall_z + 1.0], T_LC),
                  (0.5 * wall_z, 0.5 * wall_z),
                  tuple(rng.uniform(0.25, 0.45, 3))),
    ]
    wall_h = rng.uniform(2.0, 3.5)
    prims.append(Primitive("plane", _pose_cam(np.eye(3), [rng.uniform(-2, 2), ground_y - wall_h, wall_z], T_LC),
                           (9.0, wall_h), tuple(rng.uniform(0.5, 0.9, 3))))
    while len(prims) < count:
        z = rng.uniform(*object_depth)
        x = rng.uniform(-0.45, 0.45) * z
        yaw = rng.uniform(-0.8, 0.8)
        albedo = tuple(rng.uniform(0.1, 1.0, 3))
        if rng.uniform() < 0.7:
            h = rng.uniform(0.3, 1.3, 3)
            prims.append(Primitive("box", _pose_cam(ry(yaw), [x, ground_y - h[1], z], T_LC), tuple(h), albedo))
        else:
            hu, hv = rng.uniform(0.4, 1.2), rng.uniform(0.3, 1.0)
            y = ground_y - hv - rng.uniform(0.2, 1.5)
            prims.append(Primitive("plane", _pose_cam(ry(yaw), [x, y, z], T_LC), (hu, hv), albedo))
    n = int(rng.integers(n_points[0], n_points[1] + 1))
    return SceneSpec(prims, intrinsics, T_LC, n)


def random_scene(seed: int, **kwargs) -> SyntheticScene:
    """Random spec and surface samples from independent streams of one seed."""
    spec = random_scene_spec(derive_seed(seed, 0), **kwargs)
    return generate_synthetic_scene(spec, derive_seed(seed, 1))


def scene_dataset(n: int, seed: int, **kwargs) -> List[Frame]:
    return [random_scene(derive_seed(seed, i), **kwargs).as_frame() for i in range(n)]
