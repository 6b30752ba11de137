"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every primitive accepts plain arrays or :class:`Node` objects. When no input
is a node the primitive simply returns a numpy array, so the model code runs
unchanged (and without bookkeeping) at inference time. When at least one
input is a node the result is appended to that node's :class:`Tape` together
with a vector-Jacobian product closure.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError


class Node:
    __slots__ = ("value", "tape", "parents", "vjp", "op", "name", "grad")

    def __init__(self, value, tape, parents=(), vjp=None, op="leaf", name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitives in execution order; :meth:`backward` replays them in reverse."""

    def __init__(self, check_finite: bool = True) -> None:
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def leaf(self, value, name: str | None = None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self, name=name)
        self.nodes.append(node)
        return node

    def push(self, value, parents, vjp, op) -> Node:
        node = Node(value, self, parents, vjp, op)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into ``node.grad`` for every recorded node."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        stop = self.nodes.index(loss) if self.nodes[-1] is not loss else len(self.nodes) - 1
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.vjp is None:
                continue
            pgrads = node.vjp(node.grad)
            for parent, g in zip(node.parents, pgrads):
                if g is None or not isinstance(parent, Node):
                    continue
                if self.check_finite and not np.isfinite(g).all():
                    raise NumericsError(f"non-finite gradient produced by op '{node.op}'")
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradients(self, leaves: dict[str, Node]) -> dict[str, np.ndarray]:
        """Gradient per named leaf; leaves the loss never touched get exact zeros."""
        return {
            name: (np.zeros_like(node.value) if node.grad is None else np.asarray(node.grad))
            for name, node in leaves.items()
        }


def value(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _record(out, parents, vjp: Callable, op: str):
    tape = _tape_of(parents)
    if tape is None:
        return out
    return tape.push(out, tuple(parents), vjp, op)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av * bv, (a, b), lambda g: (unbroadcast(g * bv, sa), unbroadcast(g * av, sb)), "mul")


def matmul(x, w):
    """``x[..., k] @ w[k, n]`` for a 2-d right operand."""
    xv, wv = value(x), value(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul shapes {xv.shape} and {wv.shape} do not align")
    out = xv @ wv

    need_x = isinstance(x, Node)

    def vjp(g):
        gx = g @ wv.T if need_x else None
        gw = xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1])
        return gx, gw

    return _record(out, (x, w), vjp, "matmul")


def sigmoid(x):
    xv = value(x)
    y = 0.5 * (np.tanh(0.5 * xv) + 1.0)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    y = np.tanh(value(x))
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(xs), vjp, "concat")


def reshape(x, shape):
    xv = value(x)
    src = xv.shape
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def moveaxis(x, source: int, destination: int):
    xv = value(x)
    return _record(
        np.moveaxis(xv, source, destination), (x,), lambda g: (np.moveaxis(g, destination, source),), "moveaxis"
    )


def broadcast_to(x, shape):
    xv = value(x)
    src = xv.shape
    return _record(np.broadcast_to(xv, shape), (x,), lambda g: (unbroadcast(g, src),), "broadcast")


def rows(x, start: int, stop: int):
    """Leading-axis slice ``x[start:stop]``."""
    xv = value(x)

    def vjp(g):
        full = np.zeros_like(xv)
        full[start:stop] = g
        return (full,)

    return _record(xv[start:stop], (x,), vjp, "rows")


def stack(xs: Sequence, axis: int = 0):
    out = np.stack([value(x) for x in xs], axis=axis)
    return _record(out, tuple(xs), lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def graph_aggregate(x, matrices: Sequence, transposes: Sequence):
    """Concatenate ``[x, W_1 x, W_2 x, ...]`` along the feature axis.

    ``x`` has the station axis first (``[N, ..., C]``); each ``W`` is an
    ``N x N`` sparse matrix acting on that axis.
    """
    xv = value(x)
    n = xv.shape[0]
    flat = xv.reshape(n, -1)
    parts = [xv] + [(W @ flat).reshape(xv.shape) for W in matrices]
    out = np.concatenate(parts, axis=-1)
    c = xv.shape[-1]

    def vjp(g):
        gx = np.array(g[..., :c])
        for k, Wt in enumerate(transposes, start=1):
            blk = np.ascontiguousarray(g[..., k * c : (k + 1) * c]).reshape(n, -1)
            gx += (Wt @ blk).reshape(xv.shape)
        return (gx,)

    return _record(out, (x,), vjp, "graph_aggregate")


def gru_cell(gx, gh, bias, h):
    """Fused GRU update from pre-computed input/hidden transforms.

    ``gx`` and ``gh`` hold the reset, update and candidate blocks (in that
    order) along the last axis; ``bias`` is ``[b_r, b_z, b_n]``::

        r = sigmoid(gx_r + gh_r + b_r)
        z = sigmoid(gx_z + gh_z + b_z)
        n = tanh(gx_n + r * (gh_n + b_n))
        h' = (1 - z) * n + z * h
    """
    gxv, ghv, bv, hv = value(gx), value(gh), value(bias), value(h)
    d = hv.shape[-1]
    if gxv.shape[-1] != 3 * d or ghv.shape[-1] != 3 * d or bv.shape != (3 * d,):
        raise ShapeError("gru_cell expects 3*d gate blocks matching the state width")
    pre_r = gxv[..., :d] + ghv[..., :d] + bv[:d]
    pre_z = gxv[..., d : 2 * d] + ghv[..., d : 2 * d] + bv[d : 2 * d]
    r = 0.5 * (np.tanh(0.5 * pre_r) + 1.0)
    z = 0.5 * (np.tanh(0.5 * pre_z) + 1.0)
    hn = ghv[..., 2 * d :] + bv[2 * d :]
    cand = np.tanh(gxv[..., 2 * d :] + r * hn)
    for label, arr in (("reset", r), ("update", z), ("candidate", cand)):
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite {label} gate in GRU cell")
    out = cand + z * (hv - cand)
    sx, sh = gxv.shape, ghv.shape

    def vjp(g):
        d_cand = g * (1.0 - z)
        d_z = g * (hv - cand)
        d_h = g * z
        d_npre = d_cand * (1.0 - cand * cand)
        d_hn = d_npre * r
        d_rpre = d_npre * hn * r * (1.0 - r)
        d_zpre = d_z * z * (1.0 - z)
        g_x = np.concatenate([d_rpre, d_zpre, d_npre], axis=-1)
        g_h = np.concatenate([d_rpre, d_zpre, d_hn], axis=-1)
        g_b = g_h.reshape(-1, 3 * d).sum(axis=0)
        return unbroadcast(g_x, sx), unbroadcast(g_h, sh), g_b, unbroadcast(d_h, hv.shape)

    return _record(out, (gx, gh, bias, h), vjp, "gru_cell")


def mean_abs_error(pred, target):
    """Mean of ``|pred - target|``; the subgradient at zero is zero."""
    pv, tv = value(pred), value(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"prediction {pv.shape} and target {tv.shape} differ")
    diff = pv - tv
    out = np.asarray(np.abs(diff).mean())
    size = diff.size

    def vjp(g):
        s = np.sign(diff) * (g / size)
        return s, -s

    return _record(out, (pred, target), vjp, "mean_abs_error")


def mean_squared_error(pred, target):
    pv, tv = value(pred), value(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"prediction {pv.shape} and target {tv.shape} differ")
    diff = pv - tv
    out = np.asarray((diff * diff).mean())
    size = diff.size

    def vjp(g):
        s = diff * (2.0 * g / size)
        return s, -s

    return _record(out, (pred, target), vjp, "mean_squared_error")
