"""A small float64 tensor library with tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` (entered with
``with Tape() as tape:``) whenever one of their inputs requires a gradient.
Outside a tape nothing is recorded and forward values are identical.

Elementwise binary ops require equal shapes; a Python scalar is accepted as
the other operand. The only implicit broadcast is the bias add inside
:func:`linear` and :func:`conv2d`. Use :func:`expand` to broadcast
explicitly.
"""

from __future__ import annotations

import contextvars
import os
import struct
from dataclasses import dataclass, field
from numbers import Number
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("lccal_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __len__(self):
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __float__(self):
        return self.item()

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return rdiv(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    index: int
    tape: "Tape"
    output: Tensor
    parents: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order; :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def record(self, output: Tensor, parents: Tuple[Tensor, ...], vjp) -> None:
        node = _Node(len(self.nodes), self, output, parents, vjp)
        output.node = node
        output.requires_grad = True
        self.nodes.append(node)

    def leaves(self) -> List[Tensor]:
        seen = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and p.node is None:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf on the tape.

        Leaves recorded on the tape but not reachable from ``loss`` receive a
        zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not produced on this tape")
        last = loss.node.index
        acc: Dict[int, np.ndarray] = {}
        leaves: Dict[int, Tensor] = {}
        for node in self.nodes[: last + 1]:
            for p in node.parents:
                if p.requires_grad and p.node is None and id(p) not in leaves:
                    leaves[id(p)] = p
                    acc[id(p)] = np.zeros_like(p.data)
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: last + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if p.node is None:
                    acc[key] += pg
                elif key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in leaves.items():
            leaf.grad = acc[key] if leaf.grad is None else leaf.grad + acc[key]


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss.node is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    loss.node.tape.backward(loss)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``data`` as the result of a differentiable op.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, each shaped
    like that parent.
    """
    out = Tensor._result(np.asarray(data, dtype=np.float64))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, tuple(parents), vjp)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match shape {b.shape}")


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return make_op(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return make_op(a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return make_op(a.data * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return make_op(a.data / b, (a,), lambda g: (g / b,))
    b = as_tensor(b)
    _same_shape(a, b, "div")
    return make_op(a.data / b.data, (a, b),
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def rdiv(c: float, a) -> Tensor:
    """``c / a`` for a scalar ``c``."""
    a = as_tensor(a)
    return make_op(c / a.data, (a,), lambda g: (-g * c / (a.data * a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def arccos(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.arccos(a.data), (a,),
                   lambda g: (-g / np.sqrt(1.0 - a.data * a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,))


def huber(a, delta: float = 1.0) -> Tensor:
    """``0.5 x^2`` for ``|x| < delta``, ``delta * (|x| - 0.5 delta)`` beyond."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < delta
    out = np.where(small, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))
    return make_op(out, (a,), lambda g: (g * np.where(small, x, delta * np.sign(x)),))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def vjp(g):
        ne = np.expand_dims(n, axis)
        safe = np.where(ne > 0, ne, 1.0)
        return (np.expand_dims(g, axis) * np.where(ne > 0, a.data / safe, 0.0),)

    return make_op(n, (a,), vjp)


# -- shape ops -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return make_op(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != ax)
        ref = tuple(s for i, s in enumerate(ts[0].shape) if i != ax)
        if t.ndim != nd or other != ref:
            raise ShapeError(f"concat: shape {ts[0].shape} incompatible with {t.shape} on axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return make_op(np.concatenate([t.data for t in ts], axis=ax), ts,
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        _same_shape(ts[0], t, "stack")
    n = len(ts)
    ax = axis % (ts[0].ndim + 1)
    return make_op(np.stack([t.data for t in ts], axis=ax), ts,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def expand(a, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (same rank required)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    return make_op(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (np.sum(g, axis=axes, keepdims=True),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# -- linear algebra and layers --------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape {a.shape} incompatible with shape {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape ``(N, in)`` and ``w`` of shape ``(out, in)``."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
        out = out + b.data
        parents.append(b)

    def vjp(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_op(out, parents, vjp)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weights (im2col + matmul)."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {w.shape}")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    Ho = conv_output_size(H, kh, s, p)
    Wo = conv_output_size(W, kw, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    xp = np.ascontiguousarray(xp)
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(N, Ho, Wo, C, kh, kw), strides=(sn, sh * s, sw * s, sc, sh, sw))
    cols = win.reshape(N * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        grads = [None, (gm.T @ cols).reshape(w.shape)]
        if x.requires_grad:
            dcols = (gm @ wm).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grads[0] = dxp[:, :, p:p + H, p:p + W] if p else dxp
        if b is not None:
            grads.append(gm.sum(axis=0))
        return grads

    return make_op(out, parents, vjp)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments plus step counter and hyper-parameters."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
                   state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise ShapeError(f"optimizer_step: {len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer_step: parameter list changed since the first step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"optimizer_step: gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"LCCALCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, version, shape table, then raw LE data."""
    header = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    blobs = []
    for name, arr in params.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        key = name.encode("utf-8")
        header.append(struct.pack("<H", len(key)) + key)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blobs.append(np.ascontiguousarray(arr).tobytes())
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(header))
        f.write(b"".join(blobs))
    os.replace(tmp, path)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        table = []
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + klen].decode("utf-8")
            off += klen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            if off + 8 * n > len(buf):
                raise FormatError(f"{path}: truncated data for {name!r} at byte {off}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint header") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after tensor data")
    return out
