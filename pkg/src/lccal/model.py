"""Twin-branch calibration network: residual feature extractors, correlation
layer and a fully connected regression head for ``(t, q)``."""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .costvolume import correlation
from .errors import ConfigError, ShapeError
from .geometry import Transform, quat_to_rotmat
from .projection import normalize_depth
from .tensor import Tensor

CONFIG_VERSION = 1
QUAT_EPS = 1e-12

# Per-channel normalization applied to 8-bit RGB before the network.
RGB_MEAN = 0.45
RGB_STD = 0.25


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 128
    widths: Tuple[int, ...] = (8, 16, 32, 32, 32)
    corr_radius: int = 2
    head_hidden: int = 512
    branch_hidden: int = 128
    leaky_slope: float = 0.1
    # "flatten" keeps the spatial layout of the cost volume; "mean" pools it away.
    head_input: str = "flatten"
    max_depth: float = 80.0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def feature_size(self) -> Tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def cost_channels(self) -> int:
        return (2 * self.corr_radius + 1) ** 2

    @property
    def head_features(self) -> int:
        if self.head_input == "mean":
            return self.cost_channels
        h, w = self.feature_size
        return self.cost_channels * h * w

    def validate(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"stage widths must be positive, got {self.widths}")
        s = self.stride
        if self.height < s or self.width < s or self.height % s or self.width % s:
            raise ConfigError(f"total stride {s} must divide input size {self.height}x{self.width}")
        if self.corr_radius < 0:
            raise ConfigError(f"correlation radius must be >= 0, got {self.corr_radius}")
        if self.head_hidden < 1 or self.branch_hidden < 1:
            raise ConfigError("head widths must be >= 1")
        if self.head_input not in ("flatten", "mean"):
            raise ConfigError(f"head_input must be 'flatten' or 'mean', got {self.head_input!r}")
        if not self.max_depth > 0:
            raise ConfigError(f"max_depth must be positive, got {self.max_depth}")

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps({"version": CONFIG_VERSION, "model": d}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        doc = json.loads(text)
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported model config version {doc.get('version')}")
        return cls(**doc["model"])


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for branch, cin0 in (("rgb", 3), ("depth", 1)):
        cin = cin0
        for i, cout in enumerate(cfg.widths):
            p = f"{branch}.stage{i}"
            shapes[f"{p}.conv1.w"] = (cout, cin, 3, 3)
            shapes[f"{p}.conv1.b"] = (cout,)
            shapes[f"{p}.conv2.w"] = (cout, cout, 3, 3)
            shapes[f"{p}.conv2.b"] = (cout,)
            shapes[f"{p}.skip.w"] = (cout, cin, 1, 1)
            shapes[f"{p}.skip.b"] = (cout,)
            cin = cout
    shapes["head.fc.w"] = (cfg.head_hidden, cfg.head_features)
    shapes["head.fc.b"] = (cfg.head_hidden,)
    for name, out in (("trans", 3), ("rot", 4)):
        shapes[f"head.{name}1.w"] = (cfg.branch_hidden, cfg.head_hidden)
        shapes[f"head.{name}1.b"] = (cfg.branch_hidden,)
        shapes[f"head.{name}2.w"] = (out, cfg.branch_hidden)
        shapes[f"head.{name}2.b"] = (out,)
    return shapes


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".b"):
        if name == "head.rot2.b":
            return np.array([1.0, 0.0, 0.0, 0.0])
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=shape)
    if ".conv2." in name:
        w *= 0.5
    elif name in ("head.trans2.w", "head.rot2.w"):
        w *= 0.01
    return w


class CalibrationModel:
    """Parameters plus forward pass; see :func:`build_model`."""

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params
        self.diagnostics: Dict[str, int] = {"degenerate_quaternions": 0}

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        expected = parameter_shapes(self.cfg)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, shape in expected.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {arr.shape}, model expects {shape}")
            self.params[k].data = arr.copy()

    def save(self, path) -> None:
        """Write weights to ``path`` and the config to ``path`` with a ``.json`` suffix."""
        path = Path(path)
        T.save_checkpoint(path, self.state_dict())
        cfg_path = path.with_suffix(".json")
        tmp = str(cfg_path) + ".tmp"
        with open(tmp, "w") as f:
            f.write(self.cfg.to_json())
        os.replace(tmp, cfg_path)

    @classmethod
    def load(cls, path, cfg: Optional[ModelConfig] = None) -> "CalibrationModel":
        path = Path(path)
        if cfg is None:
            cfg = ModelConfig.from_json(path.with_suffix(".json").read_text())
        model = build_model(cfg)
        model.load_state_dict(T.load_checkpoint(path))
        return model

    def _branch(self, x: Tensor, branch: str, act) -> Tensor:
        for i in range(len(self.cfg.widths)):
            p = f"{branch}.stage{i}"
            P = self.params
            h = act(T.conv2d(x, P[f"{p}.conv1.w"], P[f"{p}.conv1.b"], stride=2, padding=1))
            h = T.conv2d(h, P[f"{p}.conv2.w"], P[f"{p}.conv2.b"], stride=1, padding=1)
            skip = T.conv2d(x, P[f"{p}.skip.w"], P[f"{p}.skip.b"], stride=2, padding=0)
            x = act(h + skip)
        return x

    def features(self, rgb, depth) -> Tuple[Tensor, Tensor]:
        slope = self.cfg.leaky_slope
        f_rgb = self._branch(rgb, "rgb", T.relu)
        f_depth = self._branch(depth, "depth", lambda t: T.leaky_relu(t, slope))
        return f_rgb, f_depth

    def forward(self, rgb, depth) -> Tuple[Tensor, Tensor]:
        """Predict ``(t, q)`` from network-ready inputs.

        ``rgb`` is ``(3, H, W)`` or ``(B, 3, H, W)``; ``depth`` is the matching
        ``(1, H, W)`` / ``(B, 1, H, W)`` normalized depth. Returns ``t`` of
        shape ``(3,)`` / ``(B, 3)`` and unit ``q`` of shape ``(4,)`` / ``(B, 4)``.
        """
        cfg = self.cfg
        rgb = T.as_tensor(rgb)
        depth = T.as_tensor(depth)
        single = rgb.ndim == 3
        if single:
            rgb = T.reshape(rgb, (1,) + rgb.shape)
            depth = T.reshape(depth, (1,) + depth.shape) if depth.ndim == 3 else depth
        B = rgb.shape[0]
        if rgb.shape != (B, 3, cfg.height, cfg.width):
            raise ShapeError(f"rgb input {rgb.shape} does not match model input (B, 3, {cfg.height}, {cfg.width})")
        if depth.shape != (B, 1, cfg.height, cfg.width):
            raise ShapeError(f"depth input {depth.shape} does not match model input (B, 1, {cfg.height}, {cfg.width})")
        slope = cfg.leaky_slope
        P = self.params
        f_rgb, f_depth = self.features(rgb, depth)
        cv = T.leaky_relu(correlation(f_rgb, f_depth, cfg.corr_radius), slope)
        if cfg.head_input == "mean":
            feat = T.mean(cv, axis=(2, 3))
        else:
            feat = T.reshape(cv, (B, -1))
        h = T.leaky_relu(T.linear(feat, P["head.fc.w"], P["head.fc.b"]), slope)
        th = T.leaky_relu(T.linear(h, P["head.trans1.w"], P["head.trans1.b"]), slope)
        t = T.linear(th, P["head.trans2.w"], P["head.trans2.b"])
        qh = T.leaky_relu(T.linear(h, P["head.rot1.w"], P["head.rot1.b"]), slope)
        q = normalize_quaternion(T.linear(qh, P["head.rot2.w"], P["head.rot2.b"]), self.diagnostics)
        if single:
            return T.reshape(t, (3,)), T.reshape(q, (4,))
        return t, q

    __call__ = forward


def normalize_quaternion(raw: Tensor, diagnostics: Optional[dict] = None) -> Tensor:
    """Divide each row of ``(B, 4)`` by its norm, guarding norms below 1e-12."""
    n = T.norm(raw, axis=1)
    degenerate = int(np.count_nonzero(n.data < QUAT_EPS))
    if degenerate and diagnostics is not None:
        diagnostics["degenerate_quaternions"] = diagnostics.get("degenerate_quaternions", 0) + degenerate
    n = T.clip(n, QUAT_EPS, np.inf) if degenerate else n
    n = T.expand(T.reshape(n, (raw.shape[0], 1)), raw.shape)
    return T.div(raw, n)


def build_model(cfg: Optional[ModelConfig] = None) -> CalibrationModel:
    """Fresh model with fan-in scaled uniform weights drawn from ``cfg.seed``."""
    cfg = cfg or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        params[name] = Tensor(_init_param(name, shape, rng), requires_grad=True, name=name)
    return CalibrationModel(cfg, params)


def prepare_rgb(image: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 (or ``(H, W)`` gray) image to normalized ``(3, H, W)`` float."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    x = img.astype(np.float64) / 255.0
    return ((x - RGB_MEAN) / RGB_STD).transpose(2, 0, 1)


def prepare_depth(depth: np.ndarray, max_depth: float) -> np.ndarray:
    return normalize_depth(depth, max_depth)[None]


def predict_transform(t_pred, q_pred) -> Transform:
    """Assemble the predicted rigid transform from translation and quaternion."""
    t = np.asarray(t_pred.data if isinstance(t_pred, Tensor) else t_pred, dtype=np.float64).reshape(3)
    q = np.asarray(q_pred.data if isinstance(q_pred, Tensor) else q_pred, dtype=np.float64).reshape(4)
    return Transform(quat_to_rotmat(q), t, validate=False)
