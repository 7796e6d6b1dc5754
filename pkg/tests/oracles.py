"""Independent reference implementations used as test oracles."""

import numpy as np


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def rodrigues(axis, angle) -> np.ndarray:
    """Axis-angle rotation, written independently of the quaternion path."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return rodrigues(rng.standard_normal(3), rng.uniform(0.0, np.pi))


def homogeneous(R, t) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M



def project_scalar(points, R, t, fx, fy, cx, cy, width, height):
    """Per-point pinhole projection with explicit loops; returns kept (u, v, z, index)."""
    out = []
    for i, p in enumerate(np.asarray(points, dtype=np.float64)):
        x = sum(R[0][j] * p[j] for j in range(3)) + t[0]
        y = sum(R[1][j] * p[j] for j in range(3)) + t[1]
        z = sum(R[2][j] * p[j] for j in range(3)) + t[2]
        if z <= 0:
            continue
        u = int(np.floor(fx * x / z + cx + 0.5))
        v = int(np.floor(fy * y / z + cy + 0.5))
        if 0 <= u < width and 0 <= v < height:
            out.append((u, v, z, i))
    return out


def paint_depth(pixels, width, height):
    """Sort by depth, far first, and paint; the last write per pixel is the nearest."""
    img = np.zeros((height, width))
    for u, v, z, _ in sorted(pixels, key=lambda p: -p[2]):
        img[v, u] = z
    return img


def loop_conv2d(x, w, b, stride, padding):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for a in range(kh):
                            for e in range(kw):
                                acc += w[o, c, a, e] * xp[n, c, i * stride + a, j * stride + e]
                    out[n, o, i, j] = acc
    return out


def loop_correlation(a, b, d):
    C, H, W = a.shape
    slots = [(dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]
    out = np.zeros((len(slots), H, W))
    for k, (dy, dx) in enumerate(slots):
        for y in range(H):
            for x in range(W):
                if 0 <= y + dy < H and 0 <= x + dx < W:
                    acc = 0.0
                    for c in range(C):
                        acc += a[c, y, x] * b[c, y + dy, x + dx]
                    out[k, y, x] = acc / C
    return out


def fd_worst_error(fn, inputs, n_coords=100, h=1e-4, seed=0, floor=1e-6):
    """Tape gradient of ``sum(w * fn(...))`` against central differences, coordinate by coordinate.

    Returns the worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    over ``n_coords`` sampled input coordinates.
    """
    from lccal.tensor import Tape, Tensor

    rng = np.random.default_rng(seed)
    base = [np.array(x, dtype=np.float64) for x in inputs]
    out0 = np.asarray(fn(*[Tensor(x) for x in base]).data)
    w = rng.standard_normal(out0.shape)

    def scalar(arrays):
        return float(np.sum(w * np.asarray(fn(*[Tensor(a) for a in arrays]).data)))

    leaves = [Tensor(x.copy(), requires_grad=True) for x in base]
    with Tape() as tape:
        out = fn(*leaves)
        loss = (out * Tensor(w)).sum()
    tape.backward(loss)

    sizes = [x.size for x in base]
    total = sum(sizes)
    picks = rng.choice(total, size=n_coords, replace=total < n_coords)
    worst = 0.0
    for flat in picks:
        k = 0
        while flat >= sizes[k]:
            flat -= sizes[k]
            k += 1
        plus = [x.copy() for x in base]
        minus = [x.copy() for x in base]
        plus[k].reshape(-1)[flat] += h
        minus[k].reshape(-1)[flat] -= h
        numeric = (scalar(plus) - scalar(minus)) / (2.0 * h)
        analytic = float(np.asarray(leaves[k].grad).reshape(-1)[flat])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst
