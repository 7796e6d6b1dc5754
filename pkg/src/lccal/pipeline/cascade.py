"""Multi-range iterative refinement.

Each stage renders a depth image with the current extrinsic, predicts the
remaining deviation ``T_k`` and updates ``current <- T_k^-1 @ current``.
After stages ``0..k`` the running extrinsic equals
``(T_0 @ T_1 @ ... @ T_k)^-1 @ T_init``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence, Union

import numpy as np

from ..errors import CascadeError, ConfigError
from ..geometry import Transform, euler_rpy_to_rotmat, max_abs_diff, se3_compose, se3_inverse
from ..model import CalibrationModel, predict_transform, prepare_depth, prepare_rgb
from ..perturb import CASCADE_RANGES, RangeSpec
from ..projection import CameraIntrinsics, fill_ratio, render_depth

# (rgb image, depth image, current extrinsic) -> predicted deviation
StagePredictor = Callable[[np.ndarray, np.ndarray, Transform], Transform]


class ModelStage:
    """Network inference as a cascade stage."""

    def __init__(self, model: CalibrationModel):
        self.model = model

    @classmethod
    def load(cls, checkpoint) -> "ModelStage":
        path = Path(checkpoint)
        if not path.exists():
            raise CascadeError(f"missing checkpoint {path}")
        return cls(CalibrationModel.load(path))

    def __call__(self, rgb: np.ndarray, depth: np.ndarray, extrinsic: Transform) -> Transform:
        cfg = self.model.cfg
        if rgb.shape[:2] != (cfg.height, cfg.width):
            raise CascadeError(f"image {rgb.shape[:2]} does not match model input {(cfg.height, cfg.width)}")
        t, q = self.model.forward(prepare_rgb(rgb), prepare_depth(depth, cfg.max_depth))
        if not (np.all(np.isfinite(t.data)) and np.all(np.isfinite(q.data))):
            raise CascadeError("network produced a non-finite prediction")
        return predict_transform(t, q)


class OracleStage:
    """Predicts the exact remaining deviation ``current @ T_LC^-1``.

    With ``noise=(sigma_t_m, sigma_r_rad, rng)`` the prediction is perturbed by
    Gaussian translation noise and Gaussian Euler-angle noise.
    """

    def __init__(self, T_LC: Transform, noise=None):
        self.T_LC = T_LC
        self.noise = noise

    def __call__(self, rgb, depth, extrinsic: Transform) -> Transform:
        pred = se3_compose(extrinsic, se3_inverse(self.T_LC))
        if self.noise is None:
            return pred
        sigma_t, sigma_r, rng = self.noise
        eps = Transform(euler_rpy_to_rotmat(*rng.normal(0.0, sigma_r, 3)), rng.normal(0.0, sigma_t, 3),
                        validate=False)
        return se3_compose(eps, pred)


class FixedStage:
    def __init__(self, T_k: Transform):
        self.T_k = T_k

    def __call__(self, rgb, depth, extrinsic) -> Transform:
        return self.T_k


@dataclass(frozen=True)
class CascadeStage:
    range: RangeSpec
    checkpoint: str


@dataclass
class CascadeConfig:
    """Ordered stages, largest miscalibration range first."""

    stages: List[CascadeStage]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("cascade needs at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if not (b.range.max_translation < a.range.max_translation and b.range.max_rotation < a.range.max_rotation):
                raise ConfigError(f"cascade ranges must strictly decrease: {a.range} then {b.range}")

    def predictors(self) -> List[ModelStage]:
        return [ModelStage.load(s.checkpoint) for s in self.stages]

    def to_json(self) -> str:
        return json.dumps({"version": 1, "stages": [
            {"max_translation_m": s.range.max_translation, "max_rotation_deg": s.range.max_rotation_deg,
             "checkpoint": s.checkpoint} for s in self.stages]}, indent=2)

    @classmethod
    def from_json(cls, text: str, base_dir=None) -> "CascadeConfig":
        doc = json.loads(text)
        stages = []
        for s in doc["stages"]:
            ckpt = Path(s["checkpoint"])
            if base_dir is not None and not ckpt.is_absolute():
                ckpt = Path(base_dir) / ckpt
            stages.append(CascadeStage(RangeSpec.from_degrees(s["max_translation_m"], s["max_rotation_deg"]),
                                       str(ckpt)))
        return cls(stages)

    @classmethod
    def load(cls, path) -> "CascadeConfig":
        path = Path(path)
        return cls.from_json(path.read_text(), base_dir=path.parent)

    @classmethod
    def default_ranges(cls, checkpoints: Sequence[str]) -> "CascadeConfig":
        return cls([CascadeStage(r, str(c)) for r, c in zip(CASCADE_RANGES, checkpoints)])


@dataclass
class CalibrationEstimate:
    T_init: Transform
    T_LC_hat: Transform
    stages: List[Transform] = field(default_factory=list)
    fill_ratios: List[float] = field(default_factory=list)

    def closed_form(self) -> Transform:
        """``(T_0 @ ... @ T_k)^-1 @ T_init`` recomputed from the stored stages."""
        prod = Transform.identity()
        for Tk in self.stages:
            prod = se3_compose(prod, Tk)
        return se3_compose(se3_inverse(prod), self.T_init)

    def check(self, atol: float = 1e-9) -> bool:
        return max_abs_diff(self.closed_form(), self.T_LC_hat) <= atol

    def to_dict(self) -> dict:
        return {"T_init": self.T_init.to_text(), "T_LC_hat": self.T_LC_hat.to_text(),
                "stages": [s.to_text() for s in self.stages], "fill_ratios": list(self.fill_ratios)}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationEstimate":
        return cls(Transform.from_text(d["T_init"]), Transform.from_text(d["T_LC_hat"]),
                   [Transform.from_text(s) for s in d["stages"]], list(d["fill_ratios"]))


def refine_cascade(rgb: np.ndarray, cloud, T_init: Transform,
                   cascade: Union[CascadeConfig, Sequence[StagePredictor]],
                   intrinsics: CameraIntrinsics) -> CalibrationEstimate:
    """Run every stage in order and return the refined extrinsic with its provenance."""
    stages = cascade.predictors() if isinstance(cascade, CascadeConfig) else list(cascade)
    if not stages:
        raise CascadeError("cascade has no stages")
    current = T_init
    outs, fills = [], []
    for k, stage in enumerate(stages):
        depth = render_depth(cloud, current, intrinsics)
        fills.append(fill_ratio(depth))
        try:
            T_k = stage(rgb, depth, current)
        except CascadeError as exc:
            raise CascadeError(f"stage {k}: {exc}", stage=k) from exc
        if not (np.all(np.isfinite(T_k.rotation)) and np.all(np.isfinite(T_k.translation))):
            raise CascadeError(f"stage {k} produced a non-finite transform", stage=k)
        outs.append(T_k)
        current = se3_compose(se3_inverse(T_k), current)
    return CalibrationEstimate(T_init, current, outs, fills)
