"""Fast oracle checks runnable from an installed package (``lccal selftest``).

Each check compares the library against a slow, obviously-correct
reimplementation on a handful of random cases. The full suites live in the
test directory; these are the smoke-sized versions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from . import tensor as T
from .costvolume import correlation
from .geometry import Transform, rotmat_to_quat, se3_compose, se3_inverse
from .gradcheck import gradcheck
from .losses import point_cloud_loss, quat_to_rotmat_tensor, rotation_loss, smooth_l1
from .perturb import CASCADE_RANGES, make_initial_extrinsic, sample_deviation
from .pipeline.cascade import OracleStage, refine_cascade
from .pipeline.metrics import evaluate
from .projection import CameraIntrinsics, render_depth


class CheckFailed(Exception):
    pass


def _require(ok, message: str) -> None:
    if not ok:
        raise CheckFailed(message)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_transform(rng: np.random.Generator, scale: float = 1.0) -> Transform:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return Transform.from_quat(q, scale * rng.standard_normal(3))


def _loop_correlation(a: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    C, H, W = a.shape
    out = np.zeros(((2 * d + 1) ** 2, H, W))
    for k, (dy, dx) in enumerate((dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)):
        for y in range(H):
            for x in range(W):
                if 0 <= y + dy < H and 0 <= x + dx < W:
                    out[k, y, x] = sum(a[c, y, x] * b[c, y + dy, x + dx] for c in range(C)) / C
    return out


def check_cost_volume(rng) -> str:
    worst = 0.0
    for _ in range(10):
        C, H, W, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 6), int(rng.integers(0, 3))
        a, b = rng.standard_normal((C, H, W)), rng.standard_normal((C, H, W))
        worst = max(worst, float(np.max(np.abs(correlation(a, b, d).data - _loop_correlation(a, b, d)))))
    _require(worst < 1e-10, f"max abs error {worst:.3g}")
    return f"max abs error {worst:.2e}"


def check_gradients(rng) -> str:
    q = rng.standard_normal(4)
    cases = {
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
                   [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]),
        "correlation": (lambda a, b: correlation(a, b, 1),
                        [rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))]),
        "smooth_l1": (lambda t: smooth_l1(t, np.zeros(6)), [rng.uniform(-2, 2, 6)]),
        "rotation_loss": (lambda p: rotation_loss(q, p), [q + 0.3 * rng.standard_normal(4)]),
        "quat_to_rotmat": (quat_to_rotmat_tensor, [q]),
    }
    worst = {}
    for name, (fn, inputs) in cases.items():
        worst[name] = gradcheck(fn, inputs, n_coords=20, seed=int(rng.integers(1 << 30)))
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    _require(not bad, f"relative errors {bad}")
    return f"worst relative error {max(worst.values()):.2e}"


def check_cascade(rng) -> str:
    worst = 0.0
    for _ in range(20):
        T_init = _random_transform(rng)
        outs = [_random_transform(rng, 0.1) for _ in range(5)]
        cur = T_init
        prod = Transform.identity()
        for Tk in outs:
            cur = se3_compose(se3_inverse(Tk), cur)
            prod = se3_compose(prod, Tk)
        closed = se3_compose(se3_inverse(prod), T_init)
        worst = max(worst, float(np.max(np.abs(cur.as_matrix() - closed.as_matrix()))))
    _require(worst < 1e-12, f"sequential vs closed form {worst:.3g}")
    k = CameraIntrinsics(50.0, 50.0, 16.0, 8.0, 32, 16)
    T_LC = _random_transform(rng)
    cloud = rng.uniform(-5, 5, (200, 3))
    img = np.zeros((16, 32, 3), np.uint8)
    dev = sample_deviation(CASCADE_RANGES[0], int(rng.integers(1 << 31)))
    est = refine_cascade(img, cloud, make_initial_extrinsic(T_LC, dev.delta), [OracleStage(T_LC)] * 5, k)
    err = float(np.max(np.abs(est.T_LC_hat.as_matrix() - T_LC.as_matrix())))
    _require(err < 1e-9, f"oracle cascade recovery error {err:.3g}")
    return f"algebra {worst:.1e}, oracle recovery {err:.1e}"


def check_losses(rng) -> str:
    worst = 0.0
    for _ in range(10):
        cloud = rng.uniform(-10, 10, (100, 3))
        T_LC = _random_transform(rng)
        delta = _random_transform(rng, 0.2)
        init = se3_compose(delta, T_LC)
        worst = max(worst, abs(float(point_cloud_loss(cloud, T_LC, delta, init))))
        t = rng.uniform(-1, 1, 3)
        shift = Transform(None, t)
        val = float(point_cloud_loss(cloud, T_LC, Transform.identity(), se3_compose(shift, T_LC)))
        worst = max(worst, abs(val - float(np.linalg.norm(t))))
    _require(worst < 1e-9, f"identity violation {worst:.3g}")
    return f"max deviation {worst:.1e}"


def check_projection(rng) -> str:
    k = CameraIntrinsics(40.0, 40.0, 12.0, 9.0, 24, 18)
    for _ in range(10):
        pts = rng.uniform([-6, -6, -1], [6, 6, 12], (300, 3))
        ext = _random_transform(rng, 0.2)
        depth = render_depth(pts, ext, k)
        oracle = np.zeros((k.height, k.width))
        cam = [ext.rotation @ p + ext.translation for p in pts]
        # Paint far to near so the nearest point wins.
        for c in sorted(cam, key=lambda c: -c[2]):
            if c[2] <= 0:
                continue
            u = math.floor(k.fx * c[0] / c[2] + k.cx + 0.5)
            v = math.floor(k.fy * c[1] / c[2] + k.cy + 0.5)
            if 0 <= u < k.width and 0 <= v < k.height:
                oracle[v, u] = c[2]
        _require(np.array_equal(depth > 0, oracle > 0), "render_depth occupancy differs from paint oracle")
        _require(np.allclose(depth, oracle, rtol=0, atol=1e-12), "render_depth values differ from paint oracle")
        perm = rng.permutation(len(pts))
        _require(np.array_equal(render_depth(pts[perm], ext, k), depth), "not permutation invariant")
    return "10 clouds match, permutations bit-identical"


def check_metrics(rng) -> str:
    worst = 0.0
    for _ in range(20):
        a, b = _random_transform(rng), _random_transform(rng)
        r = evaluate(a, b)
        e_t = 100.0 * math.sqrt(sum((x - y) ** 2 for x, y in zip(a.translation, b.translation)))
        qa, qb = rotmat_to_quat(a.rotation).as_array(), rotmat_to_quat(b.rotation).as_array()
        e_r = math.degrees(2.0 * math.acos(min(1.0, abs(float(qa @ qb)))))
        worst = max(worst, abs(r.E_t - e_t), abs(r.E_R - e_r))
    _require(worst < 1e-9, f"metric mismatch {worst:.3g}")
    return f"max deviation {worst:.1e}"


CHECKS: List[tuple] = [
    ("cost volume vs loop oracle", check_cost_volume),
    ("finite-difference gradients", check_gradients),
    ("cascade algebra and oracle recovery", check_cascade),
    ("point-cloud loss identities", check_losses),
    ("z-buffer vs paint oracle", check_projection),
    ("error metrics", check_metrics),
]


def run_selftest(seed: int = 0, checks=None) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in checks or CHECKS:
        start = time.perf_counter()
        try:
            detail, ok = fn(rng), True
        except CheckFailed as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - start))
    return results
