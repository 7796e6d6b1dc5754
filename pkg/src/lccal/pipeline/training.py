"""Per-range training loop.

A step draws frames in a seeded per-epoch order, samples a deviation for
each from the ``(seed, epoch, frame)`` stream, renders the miscalibrated
depth image and regresses the deviation with the full three-term loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import __version__
from .. import tensor as T
from ..errors import ValidationError
from ..geometry import Transform
from ..io.frame import Frame
from ..losses import LossLog, LossWeights, total_loss
from ..model import CalibrationModel, prepare_depth, prepare_rgb
from ..perturb import RangeSpec, derive_seed, make_initial_extrinsic, sample_deviation
from ..projection import project_points, render_depth

log = logging.getLogger(__name__)


@dataclass
class TrainOptions:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    lr_schedule: str = "constant"   # or "cosine"
    lr_min: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    # Reuse one deviation per frame for every step (overfitting probes).
    fixed_deviation: bool = False
    init_checkpoint: Optional[str] = None
    out_dir: Optional[str] = None
    log_every: int = 50

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            frac = step / max(1, self.steps - 1)
            return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))
        raise ValidationError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class Batch:
    rgb: np.ndarray          # (B, 3, H, W)
    depth: np.ndarray        # (B, 1, H, W)
    t_gt: np.ndarray         # (B, 3)
    q_gt: np.ndarray         # (B, 4)
    clouds: List[np.ndarray]
    T_LCs: List[Transform]
    T_inits: List[Transform]
    frames: List[int]
    seeds: List[int]


@dataclass
class TrainResult:
    checkpoint: Optional[str]
    losses: List[Dict[str, float]]
    model: CalibrationModel
    seconds: float


def _check_frame(frame: Frame, model: CalibrationModel) -> Frame:
    cfg = model.cfg
    if (frame.intrinsics.width, frame.intrinsics.height) != (cfg.width, cfg.height):
        frame = frame.resized(cfg.width, cfg.height)
    return frame


def batch_positions(n_frames: int, seed: int, step: int, batch_size: int):
    """``(epoch, frame)`` pairs for one step, walking a fresh permutation each epoch."""
    out = []
    perms = {}
    for slot in range(batch_size):
        pos = step * batch_size + slot
        epoch, k = divmod(pos, n_frames)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng(derive_seed(seed, 0x5EED, epoch)).permutation(n_frames)
        out.append((epoch, int(perms[epoch][k])))
    return out


def make_batch(dataset: Sequence[Frame], rng_range: RangeSpec, model: CalibrationModel, seed: int,
               step: int, batch_size: int, fixed_deviation: bool = False) -> Batch:
    cfg = model.cfg
    rgbs, depths, ts, qs, clouds, lcs, inits, idx, seeds = ([] for _ in range(9))
    for epoch, i in batch_positions(len(dataset), seed, step, batch_size):
        frame = _check_frame(dataset[i], model)
        dev_seed = derive_seed(seed, 0 if fixed_deviation else epoch, i)
        dev = sample_deviation(rng_range, dev_seed)
        T_init = make_initial_extrinsic(frame.T_LC, dev.delta)
        depth = render_depth(frame.cloud, T_init, frame.intrinsics)
        *_, keep = project_points(frame.cloud, T_init, frame.intrinsics, return_index=True)
        pts = frame.cloud.points
        clouds.append(pts[keep] if len(keep) else pts)
        rgbs.append(prepare_rgb(frame.image))
        depths.append(prepare_depth(depth, cfg.max_depth))
        ts.append(dev.delta.translation)
        qs.append(dev.delta.quaternion.as_array())
        lcs.append(frame.T_LC)
        inits.append(T_init)
        idx.append(i)
        seeds.append(dev_seed)
    return Batch(np.stack(rgbs), np.stack(depths), np.array(ts), np.array(qs), clouds, lcs, inits, idx, seeds)


def batch_loss(model: CalibrationModel, batch: Batch, weights: LossWeights):
    t, q = model.forward(batch.rgb, batch.depth)
    return total_loss(t, q, batch.t_gt, batch.q_gt, batch.clouds, batch.T_LCs, batch.T_inits, weights)


def evaluate_batch_loss(model: CalibrationModel, dataset: Sequence[Frame], rng_range: RangeSpec,
                        opts: TrainOptions, step: int = 0) -> Dict[str, float]:
    """Loss components the training loop would see at ``step``, without updating."""
    batch = make_batch(dataset, rng_range, model, opts.seed, step, opts.batch_size, opts.fixed_deviation)
    _, parts = batch_loss(model, batch, opts.weights)
    return parts


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_range(dataset: Sequence[Frame], rng_range: RangeSpec, model: CalibrationModel,
                opts: Optional[TrainOptions] = None) -> TrainResult:
    """Train ``model`` in place on deviations drawn from ``rng_range``.

    ``opts.init_checkpoint`` warm-starts from another (usually larger-range)
    model. When ``opts.out_dir`` is set, writes ``model.ckpt`` (+ ``.json``
    config), ``loss.csv`` and ``run.json`` there.
    """
    opts = opts or TrainOptions()
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    if opts.init_checkpoint:
        model.load_state_dict(T.load_checkpoint(opts.init_checkpoint))
    out_dir = Path(opts.out_dir) if opts.out_dir else None
    loss_log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_log = LossLog(out_dir / "loss.csv")
    params = model.parameters()
    opt = T.Adam(params, lr=opts.lr)
    history = []
    start = time.perf_counter()
    for step in range(opts.steps):
        batch = make_batch(dataset, rng_range, model, opts.seed, step, opts.batch_size, opts.fixed_deviation)
        with T.Tape() as tape:
            loss, parts = batch_loss(model, batch, opts.weights)
        opt.zero_grad()
        tape.backward(loss)
        opt.lr = opts.lr_at(step)
        opt.step()
        history.append({"step": step, **parts})
        if loss_log is not None:
            loss_log.append(step, parts)
        if opts.log_every and step % opts.log_every == 0:
            log.info("step %d  L=%.5f  L_t=%.5f  L_R=%.5f  L_P=%.5f", step, parts["L"], parts["L_t"],
                     parts["L_R"], parts["L_P"])
    seconds = time.perf_counter() - start
    ckpt = None
    if out_dir is not None:
        ckpt = str(out_dir / "model.ckpt")
        model.save(ckpt)
        run = {"version": __version__, "seed": opts.seed, "range": [rng_range.max_translation, rng_range.max_rotation],
               "options": {k: v for k, v in asdict(opts).items() if k != "out_dir"},
               "model": json.loads(model.cfg.to_json()), "frames": len(dataset), "seconds": seconds}
        run["config_hash"] = config_hash({k: v for k, v in run.items() if k != "seconds"})
        with open(out_dir / "run.json", "w") as f:
            json.dump(run, f, indent=2, default=str)
    return TrainResult(ckpt, history, model, seconds)
