"""Readers for the KITTI odometry layout.

Layout::

    <root>/sequences/<NN>/velodyne/<FFFFFF>.bin
    <root>/sequences/<NN>/image_2/<FFFFFF>.png
    <root>/sequences/<NN>/calib.txt
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import FormatError
from ..geometry import Transform
from ..projection import CameraIntrinsics, PointCloud
from .frame import Frame, read_image

# Standard split: sequences 01-20 for training/validation, 00 for testing.
TRAIN_SEQUENCES = tuple(f"{i:02d}" for i in range(1, 21))
TEST_SEQUENCES = ("00",)


def read_velodyne_bin(path) -> PointCloud:
    """Decode packed little-endian float32 ``(x, y, z, reflectance)`` records."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) % 16:
        whole = len(buf) - len(buf) % 16
        raise FormatError(f"{path}: {len(buf)} bytes is not a multiple of 16; "
                          f"truncated record at byte offset {whole}")
    raw = np.frombuffer(buf, dtype="<f4").reshape(-1, 4)
    return PointCloud(raw[:, :3].astype(np.float64), raw[:, 3].astype(np.float64))


def write_velodyne_bin(path, points, intensity=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(pts))
    raw = np.concatenate([pts, np.asarray(intensity, dtype=np.float64).reshape(-1, 1)], axis=1)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(raw.astype("<f4").tobytes())
    os.replace(tmp, path)


@dataclass
class KittiCalib:
    projections: Dict[str, np.ndarray]   # "P0".."P3" -> 3x4
    Tr: Transform                        # velodyne -> rectified cam0
    T_LC: Transform                      # velodyne -> left color camera (cam2)

    def K(self, cam: str = "P2") -> np.ndarray:
        return self.projections[cam][:, :3].copy()

    def intrinsics(self, width: int, height: int, cam: str = "P2") -> CameraIntrinsics:
        K = self.projections[cam]
        return CameraIntrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height)


_NUM = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _parse_row(key: str, values: List[str], path) -> np.ndarray:
    if len(values) != 12:
        raise FormatError(f"{path}: line {key!r} has {len(values)} values, expected 12")
    for v in values:
        # float() would also accept things like "nan" or "1_0"; only plain decimals are valid.
        if not _NUM.match(v):
            raise FormatError(f"{path}: line {key!r} has non-decimal value {v!r}")
    return np.array([float(v) for v in values]).reshape(3, 4)


def camera_offset(P: np.ndarray) -> Transform:
    """Rectified cam0 -> camera ``i`` shift encoded in a projection ``P = K [I | t]``."""
    K = P[:, :3]
    return Transform(np.eye(3), np.linalg.solve(K, P[:, 3]))


def read_kitti_calib(path) -> KittiCalib:
    """Parse ``calib.txt`` and derive the LiDAR -> left color camera extrinsic.

    ``T_LC = shift(P2) @ Tr`` where ``shift(P2)`` translates rectified cam0
    coordinates into cam2 coordinates (``t = K^-1 P2[:, 3]``; for the usual
    calibration only the x component, ``P2[0,3] / P2[0,0]``, is non-zero).
    The rotation block of ``Tr`` is snapped onto SO(3).
    """
    rows: Dict[str, List[str]] = {}
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            rows[key.strip()] = rest.split()
    for key in ("P2", "Tr"):
        if key not in rows:
            raise FormatError(f"{path}: missing '{key}:' line")
    projections = {k: _parse_row(k, v, path) for k, v in rows.items() if re.fullmatch(r"P\d", k)}
    tr = Transform.from_matrix(_parse_row("Tr", rows["Tr"], path), project=True)
    T_LC = camera_offset(projections["P2"]) @ tr
    return KittiCalib(projections, tr, T_LC)


@dataclass
class KittiFrame:
    cloud: PointCloud
    image: np.ndarray
    intrinsics: CameraIntrinsics
    T_LC: Transform
    sequence: str
    index: int

    def as_frame(self) -> Frame:
        return Frame(self.image, self.cloud, self.intrinsics, self.T_LC, f"{self.sequence}/{self.index:06d}")


def sequence_dir(root, sequence: str) -> Path:
    return Path(root) / "sequences" / sequence


def frame_indices(root, sequence: str) -> List[int]:
    vel = sequence_dir(root, sequence) / "velodyne"
    return sorted(int(p.stem) for p in vel.glob("*.bin"))


def load_kitti_frame(root, sequence: str, index: int, calib: Optional[KittiCalib] = None) -> KittiFrame:
    d = sequence_dir(root, sequence)
    calib = calib or read_kitti_calib(d / "calib.txt")
    cloud = read_velodyne_bin(d / "velodyne" / f"{index:06d}.bin")
    image = read_image(d / "image_2" / f"{index:06d}.png")
    k = calib.intrinsics(image.shape[1], image.shape[0])
    return KittiFrame(cloud, image, k, calib.T_LC, sequence, index)


class KittiDataset:
    """Lazy frame list over one or more sequences, resized to the model input."""

    def __init__(self, root, sequences: Sequence[str], width: int, height: int,
                 indices: Optional[Sequence[int]] = None):
        self.root = Path(root)
        self.width = width
        self.height = height
        self._calib = {s: read_kitti_calib(sequence_dir(root, s) / "calib.txt") for s in sequences}
        self.items = []
        for s in sequences:
            idx = frame_indices(root, s) if indices is None else list(indices)
            self.items.extend((s, i) for i in idx)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> Frame:
        s, idx = self.items[i]
        return load_kitti_frame(self.root, s, idx, self._calib[s]).as_frame().resized(self.width, self.height)
