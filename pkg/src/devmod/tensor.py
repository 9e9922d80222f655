"""4D tensor engine with reverse-mode differentiation.

Every tensor is a double-precision (N, C, H, W) array. Operations record
themselves on an implicit tape: each result remembers its parents and a
closure that routes the incoming gradient to them. ``backward`` replays the
tape in reverse creation order, so every node is visited exactly once and
always after all of its consumers.

Tensors are immutable by convention once created; the optimizer rebinds
``data`` instead of writing into it. Graph construction is single threaded
per graph, but independent graphs may run in parallel threads.
"""

from __future__ import annotations

import itertools
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "no_grad",
    "constant",
    "parameter",
    "rand_normal",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "relu",
    "sum_all",
    "mean_over",
    "std_over",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "reshape",
    "concat_channels",
    "detach",
    "modulation_factor",
    "backward",
    "save_t4d",
    "load_t4d",
]

_node_ids = itertools.count(1)

_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that suppresses tape recording for cheap inference."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """A (N, C, H, W) float64 array, optionally registered on the tape.

    ``node_id`` is the tape position; it is absent (None) for constants and
    for detached tensors, and such tensors never receive a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "parents", "op", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if arr.ndim != 4:
            raise ValueError(f"tensor data must be 4D (N,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.grad: np.ndarray | None = None
        self.node_id: int | None = next(_node_ids) if self.requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.op: str | None = None
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars are promoted to (1,1,1,1) constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean_over(self, axes):
        return mean_over(self, axes)

    def std_over(self, axes, eps: float = 0.0):
        return std_over(self, axes, eps)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Tensor(np.full((1, 1, 1, 1), float(value)))
    return Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node_id = next(_node_ids)
        out.parents = tuple(parents)
        out.op = op
        out._backward = backward_fn
    else:
        out.node_id = None
        out.parents = ()
        out.op = None
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate (+=) across fan-out; callers zero them explicitly.
    """
    if loss.node_id is None:
        raise RuntimeError("loss is not part of a differentiation graph")
    if loss.data.size != 1:
        raise RuntimeError(f"loss must be scalar, got shape {loss.shape}")
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id is None or t.node_id in seen:
            continue
        seen.add(t.node_id)
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_op(a, b, "add", np.add)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_op(a, b, "sub", np.subtract)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_op(a, b, "mul", np.multiply)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), "mul", bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), "scalar_mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _broadcast_op(a, b, "div", np.divide)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), "div", bwd)


def _broadcast_op(a: Tensor, b: Tensor, name: str, ufunc) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError as e:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from e


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), "neg", bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g / (2.0 * out_data))

    return _node(out_data, (a,), "sqrt", bwd)


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), "abs", bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), "relu", bwd)


# ---------------------------------------------------------------------------
# reductions


_AXIS_ERR = "axis set must be a non-empty subset of (0, 1, 2, 3)"


def _check_axes(axes) -> tuple[int, ...]:
    axes = tuple(sorted(set(int(a) for a in axes)))
    if not axes or any(a not in (0, 1, 2, 3) for a in axes):
        raise ValueError(_AXIS_ERR)
    return axes


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum().reshape(1, 1, 1, 1), (a,), "sum", bwd)


def mean_over(a: Tensor, axes) -> Tensor:
    """Mean over an axis subset, keeping reduced dims at size 1."""
    axes = _check_axes(axes)
    m = float(np.prod([a.shape[i] for i in axes]))
    data = a.data.mean(axis=axes, keepdims=True)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / m, a.shape))

    return _node(data, (a,), "mean", bwd)


def std_over(a: Tensor, axes, eps: float = 0.0) -> Tensor:
    """Population standard deviation sqrt(mean((x - mu)^2) + eps).

    eps sits inside the square root. With eps=0 and a constant slice the
    result is 0 and the (undefined) gradient of that slice is taken as 0.
    """
    axes = _check_axes(axes)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    m = float(np.prod([a.shape[i] for i in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=axes, keepdims=True) + eps)

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(sigma > 0.0, g / (m * sigma), 0.0)
        _accumulate(a, centered * coef)

    return _node(sigma, (a,), "std", bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError("reshape target must be 4D")
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), "reshape", bwd)


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    n, _, h, w = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ValueError("concat: tensors must agree on N, H, W")
    sizes = [t.shape[1] for t in ts]
    data = np.concatenate([t.data for t in ts], axis=1)

    def bwd(g):
        start = 0
        for t, c in zip(ts, sizes):
            _accumulate(t, g[:, start:start + c])
            start += c

    return _node(data, tuple(ts), "concat", bwd)


def detach(a: Tensor) -> Tensor:
    """Same values, off the tape; backward never propagates through it."""
    return Tensor(a.data, requires_grad=False)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, H*r, W*r)."""
    r = int(r)
    n, c, h, w = x.shape
    if r < 1:
        raise ValueError("upscale factor must be >= 1")
    if c % (r * r) != 0:
        raise ValueError(f"channels {c} not divisible by r^2={r * r}")
    if r == 1:
        def bwd_id(g):
            _accumulate(x, g)

        return _node(x.data, (x,), "pixel_shuffle", bwd_id)
    c_out = c // (r * r)
    data = (
        x.data.reshape(n, c_out, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c_out, h * r, w * r)
    )

    def bwd(g):
        gin = (
            g.reshape(n, c_out, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        _accumulate(x, gin)

    return _node(np.ascontiguousarray(data), (x,), "pixel_shuffle", bwd)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle: (N, C, H*r, W*r) -> (N, C*r^2, H, W)."""
    r = int(r)
    n, c, hr, wr = x.shape
    if r < 1:
        raise ValueError("downscale factor must be >= 1")
    if hr % r != 0 or wr % r != 0:
        raise ValueError(f"spatial dims {(hr, wr)} not divisible by {r}")
    if r == 1:
        def bwd_id(g):
            _accumulate(x, g)

        return _node(x.data, (x,), "pixel_unshuffle", bwd_id)
    h, w = hr // r, wr // r
    data = (
        x.data.reshape(n, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h, w)
    )

    def bwd(g):
        gin = (
            g.reshape(n, c, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, hr, wr)
        )
        _accumulate(x, gin)

    return _node(np.ascontiguousarray(data), (x,), "pixel_unshuffle", bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Direct 2D cross-correlation with same-size zero padding.

    x is (N, C_in, H, W), w is (C_out, C_in, k, k) with k odd, b is an
    optional (1, C_out, 1, 1) bias. Output is (N, C_out, H, W).
    """
    n, c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {(kh, kw)}")
    if c_in_w != c_in:
        raise ValueError(f"input has {c_in} channels but weights expect {c_in_w}")
    if b is not None and b.shape != (1, c_out, 1, 1):
        raise ValueError(f"bias must be (1,{c_out},1,1), got {b.shape}")
    k = kh
    pad = (k - 1) // 2

    def corr(inp: np.ndarray, ker: np.ndarray) -> np.ndarray:
        # inp (N,C,H,W) zero-padded, ker (O,C,k,k) -> (N,O,H,W)
        padded = np.pad(inp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        out = np.tensordot(windows, ker, axes=[(1, 4, 5), (1, 2, 3)])
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    data = corr(x.data, w.data)
    if b is not None:
        data = data + b.data

    def bwd(g):
        if x.requires_grad:
            w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, corr(g, np.ascontiguousarray(w_flip)))
        if w.requires_grad:
            padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
            gw = np.tensordot(g, windows, axes=[(0, 2, 3), (0, 2, 3)])
            _accumulate(w, gw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, "conv2d", bwd)


# ---------------------------------------------------------------------------
# deviation modulation factor


def modulation_factor(sigma: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """exp(w * log(sigma) + b) per sample.

    At the exact default point (w, b) = (1, 0) the forward value is sigma
    itself, so the degenerate case reproduces plain deviation amplification
    bit for bit instead of round-tripping through log/exp. The gradients are
    those of the general expression in both cases.
    """
    if sigma.shape[1:] != (1, 1, 1):
        raise ValueError(f"sigma must be (N,1,1,1), got {sigma.shape}")
    if w.shape != (1, 1, 1, 1) or b.shape != (1, 1, 1, 1):
        raise ValueError("w and b must be scalar tensors of shape (1,1,1,1)")
    if np.any(sigma.data <= 0):
        idx = int(np.argwhere(sigma.data.reshape(-1) <= 0)[0][0])
        raise ValueError(f"sigma must be positive, sample {idx} has sigma <= 0")
    log_sigma = np.log(sigma.data)
    wv, bv = float(w.data.reshape(())), float(b.data.reshape(()))
    if wv == 1.0 and bv == 0.0:
        out_data = sigma.data.copy()
    else:
        out_data = np.exp(wv * log_sigma + bv)

    def bwd(g):
        go = g * out_data
        _accumulate(sigma, go * wv / sigma.data)
        _accumulate(w, (go * log_sigma).sum().reshape(1, 1, 1, 1))
        _accumulate(b, go.sum().reshape(1, 1, 1, 1))

    return _node(out_data, (sigma, w, b), "modulation_factor", bwd)


# ---------------------------------------------------------------------------
# deterministic RNG


class Rng:
    """Counter-based (Philox) random stream; a seed pins every draw."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "Rng":
        """Independent substream, derived only from (seed, key path)."""
        return Rng(self.seed, self._key + (int(index),))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)


def rand_normal(shape, rng: Rng, mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError("shape must be 4D (N,C,H,W)")
    return Tensor(rng.normal(shape, mean, std))


# ---------------------------------------------------------------------------
# flat binary serialization (.t4d)

_T4D_HEADER = struct.Struct("<4I")


def save_t4d(path, tensor_or_array) -> None:
    """Write a 16-byte uint32 LE dims header followed by float64 LE data."""
    arr = tensor_or_array.data if isinstance(tensor_or_array, Tensor) else np.asarray(tensor_or_array)
    if arr.ndim != 4:
        raise ValueError(f"t4d stores 4D arrays, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_T4D_HEADER.pack(*arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_t4d(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_T4D_HEADER.size)
        if len(header) != _T4D_HEADER.size:
            raise ValueError(f"{path}: truncated t4d header")
        shape = _T4D_HEADER.unpack(header)
        count = int(np.prod(shape))
        data = np.frombuffer(f.read(count * 8), dtype="<f8")
        if data.size != count:
            raise ValueError(f"{path}: expected {count} values, found {data.size}")
    return data.astype(np.float64).reshape(shape)
