"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Graph` is an append-only tape.  While a graph is active (``with
Graph() as g:``) every operation whose inputs are recorded appends one node
holding a vector-Jacobian closure.  :func:`backward` walks the tape once in
reverse and deposits leaf gradients into a :class:`GradStore`.

Tensors are float32 by default.  Float64 inputs are carried through unchanged,
which :func:`numeric_grad` relies on to probe functions with a precise
finite-difference oracle.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Graph",
    "GradStore",
    "MemoryMeter",
    "Tensor",
    "active_graph",
    "backward",
    "concat",
    "conv2d",
    "cosine_distance",
    "make_tensor",
    "matmul",
    "maxpool2x2",
    "memory_meter",
    "no_grad",
    "numeric_grad",
    "relu",
    "sigmoid",
]

_GRAPH_STACK: list["Graph | None"] = []
_METERS: list["MemoryMeter"] = []


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    elements: int


class Graph:
    """Append-only tape of recorded operations.

    ``elements`` counts the array entries the tape keeps alive (node outputs
    plus saved forward context); it is the quantity the memory meter tracks.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: dict[int, object] = {}
        self.elements = 0
        self.consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, op, parents, vjp, shape, saved: int = 0) -> int:
        if self.consumed:
            raise RuntimeError("graph already consumed by backward")
        size = int(np.prod(shape, dtype=np.int64)) + int(saved)
        self.nodes.append(Node(op, tuple(parents), vjp, tuple(shape), size))
        self.elements += size
        for meter in _METERS:
            meter.observe(self)
        return len(self.nodes) - 1

    def add_leaf(self, shape, key=None) -> int:
        nid = self.add("leaf", (), None, shape)
        self.leaves[nid] = nid if key is None else key
        return nid

    def release(self) -> None:
        for node in self.nodes:
            node.vjp = None
        self.elements = 0
        self.consumed = True


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; operations inside produce constant tensors."""
    _GRAPH_STACK.append(None)
    try:
        yield
    finally:
        _GRAPH_STACK.pop()


@dataclass
class MemoryMeter:
    """High-water marks of live tape size across graphs built while active."""

    peak_nodes: int = 0
    peak_elements: int = 0

    def observe(self, graph: Graph) -> None:
        self.peak_nodes = max(self.peak_nodes, len(graph.nodes))
        self.peak_elements = max(self.peak_elements, graph.elements)


@contextlib.contextmanager
def memory_meter() -> Iterator[MemoryMeter]:
    meter = MemoryMeter()
    _METERS.append(meter)
    try:
        yield meter
    finally:
        _METERS.remove(meter)


class GradStore(dict):
    """Leaf key -> accumulated gradient array."""

    def accumulate(self, key, grad: np.ndarray) -> None:
        if key in self:
            if self[key].shape != grad.shape:
                raise ValueError(f"gradient shape mismatch for leaf {key!r}")
            self[key] = self[key] + grad
        else:
            self[key] = np.array(grad, copy=True)


class Tensor:
    """Dense array, optionally recorded on the active graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, key=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.node: int | None = None
        if requires_grad:
            graph = active_graph()
            if graph is not None:
                self.graph = graph
                self.node = graph.add_leaf(arr.shape, key)

    @classmethod
    def _from_op(cls, data, op, inputs, vjp, saved: int = 0) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.graph = None
        out.node = None
        graph = active_graph()
        if graph is None:
            return out
        tracked = [t for t in inputs if isinstance(t, Tensor) and t.graph is graph]
        if not tracked:
            return out
        parents = tuple(t.node if isinstance(t, Tensor) and t.graph is graph else -1 for t in inputs)
        out.requires_grad = True
        out.graph = graph
        out.node = graph.add(op, parents, vjp, data.shape, saved)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def square(self):
        return mul(self, self)

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor contains NaN or Inf")
        return self


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def make_tensor(shape: Sequence[int], data: Sequence[float], requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    flat = np.asarray(data, dtype=np.float32).reshape(-1)
    if flat.size != math.prod(shape):
        raise ValueError(f"data length {flat.size} does not match shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


# -- elementwise ------------------------------------------------------------

def _check_const_broadcast(x: np.ndarray, c: np.ndarray) -> None:
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ValueError(f"constant of shape {c.shape} does not broadcast into {x.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    ad, bd = a.data, _data(b)
    if isinstance(b, Tensor):
        if ad.shape != bd.shape:
            raise ValueError(f"shape mismatch {ad.shape} vs {bd.shape}")
        return Tensor._from_op(ad + bd, "add", (a, b), lambda g: (g, g))
    _check_const_broadcast(ad, bd)
    return Tensor._from_op(ad + bd.astype(ad.dtype, copy=False), "add", (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    ad, bd = a.data, _data(b)
    if isinstance(b, Tensor):
        if ad.shape != bd.shape:
            raise ValueError(f"shape mismatch {ad.shape} vs {bd.shape}")
        return Tensor._from_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad), saved=2 * ad.size)
    _check_const_broadcast(ad, bd)
    bd = bd.astype(ad.dtype, copy=False)
    return Tensor._from_op(ad * bd, "mul", (a,), lambda g: (g * bd,), saved=bd.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.data.dtype), "relu", (x,),
                           lambda g: (g * mask,), saved=mask.size)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


# -- reductions and shape ops --------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=dtype).reshape(()), "sum", (x,),
                           lambda g: (np.full(shape, g, dtype=dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return Tensor._from_op(out, "transpose", (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return Tensor._from_op(out, "concat", tuple(tensors), vjp)


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shapes {ad.shape} and {bd.shape} are incompatible")
    inputs = tuple(t for t in (a, b))
    saved = (ad.size if isinstance(b, Tensor) else 0) + (bd.size if isinstance(a, Tensor) else 0)
    return Tensor._from_op(ad @ bd, "matmul", inputs, lambda g: (g @ bd.T, ad.T @ g), saved=saved)


# -- convolution network ops ---------------------------------------------------

def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    c, h, wd = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * wd)
    return (w.reshape(w.shape[0], c * 9) @ cols).reshape(w.shape[0], h, wd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on a single C x H x W image."""
    xd, wd, bd = _data(x), _data(weight), _data(bias)
    if xd.ndim != 3 or wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects C x H x W input and O x C x 3 x 3 weight, got {xd.shape}, {wd.shape}")
    if wd.shape[1] != xd.shape[0]:
        raise ValueError(f"channel mismatch: input has {xd.shape[0]}, weight expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"bias shape {bd.shape} does not match {wd.shape[0]} filters")
    out = _conv3x3(xd, wd) + bd.astype(xd.dtype)[:, None, None]

    def vjp(g):
        gx = gw = gb = None
        if isinstance(x, Tensor) and x.node is not None:
            flipped = np.ascontiguousarray(wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _conv3x3(g, flipped)
        if isinstance(weight, Tensor) and weight.node is not None:
            c, h, w_ = xd.shape
            padded = np.pad(xd, ((0, 0), (1, 1), (1, 1)))
            windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
            cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w_)
            gw = (g.reshape(g.shape[0], -1) @ cols.T).reshape(wd.shape)
        if isinstance(bias, Tensor) and bias.node is not None:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb

    return Tensor._from_op(out, "conv2d", (x, weight, bias), vjp, saved=xd.size + wd.size)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first window entry in row-major order."""
    xd = _data(x)
    if xd.ndim != 3 or xd.shape[1] < 2 or xd.shape[2] < 2:
        raise ValueError(f"maxpool2x2 needs C x H x W with H, W >= 2, got {xd.shape}")
    c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    win = xd[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((c, h, w), dtype=g.dtype)
        gx[:, : 2 * h2, : 2 * w2] = gwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), "maxpool2x2", (x,), vjp, saved=arg.size)


def cosine_distance(a, b, eps: float = 1e-8) -> Tensor:
    """Row-wise ``1 - a.b / sqrt(|a|^2 |b|^2 + eps)`` over the last axis.

    Rows where either vector has zero norm get distance 1 and zero gradient.
    Arithmetic runs in float64; the result takes the dtype of ``a``.
    """
    ad = _data(a).astype(np.float64)
    bd = _data(b).astype(np.float64)
    if ad.shape != bd.shape:
        raise ValueError(f"shape mismatch {ad.shape} vs {bd.shape}")
    dot = np.sum(ad * bd, axis=-1)
    na = np.sum(ad * ad, axis=-1)
    nb = np.sum(bd * bd, axis=-1)
    den = np.sqrt(na * nb + eps)
    live = (na * nb) > 0
    dist = np.where(live, 1.0 - dot / den, 1.0)
    out_dtype = _data(a).dtype

    def vjp(g):
        g = np.asarray(g, dtype=np.float64) * live
        # d(dot/den)/da = b/den - dot*nb*a/den^3
        coef = (g / den)[..., None]
        scale = (g * dot / den**3)[..., None]
        ga = -(coef * bd - scale * nb[..., None] * ad)
        gb = -(coef * ad - scale * na[..., None] * bd)
        return ga.astype(_data(a).dtype), gb.astype(_data(b).dtype)

    return Tensor._from_op(np.clip(dist, 0.0, 2.0).astype(out_dtype), "cosine_distance", (a, b), vjp,
                           saved=ad.size + bd.size)


# -- backward and finite differences ----------------------------------------------

def backward(root: Tensor, grads: GradStore | None = None) -> GradStore:
    """Accumulate d(root)/d(leaf) for every leaf on root's graph into ``grads``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    graph = root.graph
    if graph is None or root.node is None:
        raise RuntimeError("root is not recorded on a graph")
    if graph.consumed:
        raise RuntimeError("graph already consumed by backward")
    store = GradStore() if grads is None else grads
    pending: dict[int, np.ndarray] = {root.node: np.ones(graph.nodes[root.node].shape, dtype=root.data.dtype)}
    for nid in range(root.node, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.vjp is None:
            if nid in graph.leaves:
                store.accumulate(graph.leaves[nid], g)
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent < 0 or pg is None:
                continue
            pg = np.asarray(pg).reshape(graph.nodes[parent].shape)
            if parent in pending:
                pending[parent] = pending[parent] + pg
            else:
                pending[parent] = pg
    # leaves never reached still get a (zero) entry so callers can index them
    for nid, key in graph.leaves.items():
        if key not in store:
            store[key] = np.zeros(graph.nodes[nid].shape, dtype=np.float32)
    graph.release()
    return store


def numeric_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-3,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of a scalar function, evaluated in float64.

    With ``indices`` only those flat coordinates are probed and a 1-D array of
    estimates is returned; otherwise the result has the shape of ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(_data(x), dtype=np.float64)
    flat = base.reshape(-1)
    probe = range(flat.size) if indices is None else [int(i) for i in indices]
    out = np.zeros(len(probe))

    def value(arr):
        with no_grad():
            r = f(Tensor(arr, dtype=np.float64))
        return float(_data(r).reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    for n, i in enumerate(probe):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(base.copy())
        flat[i] = orig - eps
        lo = value(base.copy())
        flat[i] = orig
        out[n] = (hi - lo) / (2 * eps)
    return out.reshape(base.shape) if indices is None else out
