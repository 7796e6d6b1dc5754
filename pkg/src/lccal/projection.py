"""Pinhole projection of LiDAR points and Z-buffered depth rasterization."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import ConfigError, ValidationError
from .geometry import Transform

DEFAULT_MAX_DEPTH = 80.0
DEPTH_PNG_SCALE = 256.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics after scaling the image to ``width x height``."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass
class PointCloud:
    """``(N, 3)`` LiDAR-frame points in meters with optional intensity in [0, 1]."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point cloud has non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != len(self.points):
                raise ValidationError("intensity length does not match number of points")

    def __len__(self):
        return len(self.points)


CloudLike = Union[PointCloud, np.ndarray]


def _points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def project_points(cloud: CloudLike, extrinsic: Transform, k: CameraIntrinsics,
                   return_index: bool = False):
    """Project LiDAR points into integer pixel coordinates.

    Pixels are assigned by rounding to nearest (ties toward +inf). Points with
    camera-frame ``Z <= 0`` or landing outside the image are dropped.

    Returns:
        ``(u, v, depth)`` with integer ``u``, ``v`` arrays and float depths;
        with ``return_index`` also the indices of the kept points.
    """
    pts = _points(cloud)
    cam = pts @ extrinsic.rotation.T + extrinsic.translation
    z = cam[:, 2]
    front = np.flatnonzero(z > 0)
    cam = cam[front]
    z = cam[:, 2]
    u = np.floor(k.fx * cam[:, 0] / z + k.cx + 0.5)
    v = np.floor(k.fy * cam[:, 1] / z + k.cy + 0.5)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    out = (u[inside].astype(np.int64), v[inside].astype(np.int64), z[inside])
    if return_index:
        return out + (front[inside],)
    return out


def render_depth(cloud: CloudLike, extrinsic: Transform, k: CameraIntrinsics) -> np.ndarray:
    """Z-buffered sparse depth image; 0 marks pixels without a return."""
    u, v, z = project_points(cloud, extrinsic, k)
    buf = np.full(k.height * k.width, np.inf)
    np.minimum.at(buf, v * k.width + u, z)
    buf[np.isinf(buf)] = 0.0
    return buf.reshape(k.height, k.width)


def fill_ratio(depth: np.ndarray) -> float:
    return float(np.count_nonzero(depth)) / depth.size


def normalize_depth(depth: np.ndarray, max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    """Scale depths to [0, 1] by ``min(depth, max_depth) / max_depth``."""
    if not max_depth > 0:
        raise ConfigError(f"max_depth must be positive, got {max_depth}")
    return np.minimum(np.asarray(depth, dtype=np.float64), max_depth) / max_depth


def save_depth_png(path, depth: np.ndarray, meta: Optional[Mapping[str, object]] = None) -> None:
    """16-bit PNG with ``value = round(depth * 256)`` (KITTI depth encoding).

    ``meta`` entries are stored as PNG text chunks.
    """
    raw = np.clip(np.round(np.asarray(depth) * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    info = None
    if meta:
        info = PngInfo()
        for k, v in meta.items():
            info.add_text(str(k), str(v))
    _atomic_save(Image.fromarray(raw), path, "PNG", pnginfo=info)


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.array(im, dtype=np.float64)
    return raw / DEPTH_PNG_SCALE


def save_depth_pgm(path, depth: np.ndarray, max_depth: Optional[float] = None) -> None:
    """8-bit graymap for eyeballing; nearer points are brighter, empty pixels black."""
    d = np.asarray(depth, dtype=np.float64)
    if max_depth is None:
        max_depth = float(d.max()) if d.any() else 1.0
    img = np.where(d > 0, 255.0 * (1.0 - 0.8 * np.minimum(d, max_depth) / max_depth), 0.0)
    _atomic_save(Image.fromarray(img.astype(np.uint8)), path, "PPM")


def _atomic_save(img: Image.Image, path, fmt: str, **kwargs) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    img.save(tmp, format=fmt, **{k: v for k, v in kwargs.items() if v is not None})
    os.replace(tmp, path)
