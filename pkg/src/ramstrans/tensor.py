"""Small reverse-mode autograd engine over numpy arrays.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph once in a fixed
topological order, so repeated runs accumulate in the same order and give
bit-identical gradients.

The GELU used here is the tanh approximation
``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
"""

from __future__ import annotations

import contextlib
import math
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._freed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._freed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    out = (a.data + b.data).astype(np.result_type(a.data, b.data), copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = b
        a = _lift(a, DEFAULT_DTYPE)
        out = a.data * np.asarray(s, dtype=a.dtype)

        def bw_scalar(g):
            return (g * np.asarray(s, dtype=a.dtype),)

        return _result(out, (a,), bw_scalar, "mul")
    a = _lift(a, b.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    c = np.asarray(math.sqrt(2.0 / math.pi), dtype=d.dtype)
    k = np.asarray(0.044715, dtype=d.dtype)
    d2 = d * d
    t = np.tanh(c * (d + k * d2 * d))
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * k * d2)
        local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner
        return (g * local,)

    return _result(out.astype(d.dtype, copy=False), (x,), bw, "gelu")


# ------------------------------------------------------------------ reductions
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------------------ shape ops
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def index(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(out, tuple(tensors), bw, "concat")


# ------------------------------------------------------------------ linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} vs {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "linear")


# ------------------------------------------------------------------ nn primitives
def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if c == 0:
        raise ValueError("layer_norm over an empty axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm affine shape mismatch for C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of logits (B, n)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (B, n) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    bsz = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-logp[np.arange(bsz), labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(bsz), labels] -= 1.0
        return (p * (g / bsz),)

    return _result(loss, (logits,), bw, "cross_entropy")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ------------------------------------------------------------------ backward
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The recorded graph is released afterwards; a second call on the same loss
    raises ``RuntimeError``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("graph already released by a previous backward call")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ images
def bilinear_resize(img, out_h: int, out_w: int):
    """Resize an (H, W, ch) image with half-pixel-centre sampling.

    Source coordinates are ``(i + 0.5) * in / out - 0.5`` clamped to the
    valid range. Equal sizes return an exact copy. Accepts an ndarray or a
    Tensor and returns the same kind (never recorded in the graph).
    """
    as_tensor = isinstance(img, Tensor)
    arr = img.data if as_tensor else np.asarray(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"zero-sized resize target {out_h}x{out_w}")
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty (H, W, ch) image, got {arr.shape}")
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        out = arr.copy()
    else:
        y0, y1, wy = _sample_axis(h, out_h)
        x0, x1, wx = _sample_axis(w, out_w)
        dt = arr.dtype if arr.dtype.kind == "f" else np.float64
        wy = wy.astype(dt)[:, None, None]
        wx = wx.astype(dt)[None, :, None]
        top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
        bot = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
        out = (top * (1 - wy) + bot * wy).astype(dt, copy=False)
    return Tensor(out) if as_tensor else out


def _sample_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


# ------------------------------------------------------------------ checkpoint container
MAGIC = b"RAMS1"


class ContainerError(ValueError):
    """Malformed or truncated tensor container."""


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named tensors as little-endian float32 entries after the magic bytes.

    Entry layout: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
    then the float32 payload in C order.
    """
    chunks = [MAGIC]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ContainerError("bad magic; not a RAMS1 container")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError("truncated container")
        piece = buf[pos : pos + n]
        pos += n
        return piece

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        if name in out:
            raise ContainerError(f"duplicate entry {name!r}")
        out[name] = arr
    return out
