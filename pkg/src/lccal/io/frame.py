from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from ..geometry import Transform
from ..projection import CameraIntrinsics, PointCloud


@dataclass
class Frame:
    """One synchronized camera image + LiDAR sweep with ground-truth extrinsic."""

    image: np.ndarray          # (H, W, 3) uint8
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    T_LC: Transform
    name: str = ""

    def resized(self, width: int, height: int) -> "Frame":
        """Rescale the image (bilinear) and intrinsics to ``width x height``."""
        if (width, height) == (self.intrinsics.width, self.intrinsics.height):
            return self
        img = Image.fromarray(self.image).resize((width, height), Image.BILINEAR)
        return replace(self, image=np.asarray(img), intrinsics=self.intrinsics.resized(width, height))


def to_rgb(img: np.ndarray) -> np.ndarray:
    """Grayscale or RGBA 8-bit array to ``(H, W, 3)`` uint8."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[..., :3]
    elif img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img.astype(np.uint8))


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_rgb(np.asarray(im))
