"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the operations the embedding network and the adaptation losses need are
provided. A graph is rebuilt for every forward pass; ``backward`` walks it once
in reverse topological order and returns gradients for the named leaves that
are not frozen.

Bilinear upsampling uses the pixel-center convention (``align_corners=False``),
ReLU has subgradient 0 at 0.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(Exception):
    """Base class for graph construction / differentiation errors."""


class ShapeError(GraphError, ValueError):
    def __init__(self, op: str, axis: str, expected, got):
        self.op, self.axis, self.expected, self.got = op, axis, expected, got
        super().__init__(f"{op}: dimension mismatch on axis '{axis}' (expected {expected}, got {got})")


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value produced")


class Node:
    """A value in the computation graph.

    Leaves carry a ``name``; frozen leaves and constants never receive an
    adjoint.
    """

    __slots__ = ("value", "parents", "grad_fn", "op", "name", "requires_grad")

    def __init__(self, value, parents: Sequence["Node"] = (), grad_fn: Callable | None = None,
                 op: str = "leaf", name: str | None = None, requires_grad: bool = False):
        self.value = value
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"


def leaf(value, name: str, frozen: bool = False) -> Node:
    arr = np.array(value, dtype=np.float64)
    return Node(arr, op="leaf", name=name, requires_grad=not frozen)


def const(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Node], grad_fn: Callable) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    rg = any(p.requires_grad for p in parents)
    return Node(value, parents, grad_fn if rg else None, op=op, requires_grad=rg)


def backward(root: Node) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns ``{leaf name: adjoint}`` for every trainable leaf reachable from
    ``root``. Adjoints live only inside this call, so repeated sweeps over the
    same graph give identical results.
    """
    if root.value.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            if node.name is not None:
                out[node.name] = out[node.name] + g if node.name in out else g
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            adj[k] = adj[k] + pg if k in adj else pg
    return out


# ---------------------------------------------------------------------------
# elementwise / reductions

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError("add", "all", a.shape, b.shape)
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError("mul", "all", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Node, alpha: float) -> Node:
    return _make("scale", x.value * alpha, (x,), lambda g: (g * alpha,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def log(x: Node, floor: float = 1e-12) -> Node:
    """Natural log with the argument floored at ``floor``."""
    xv = x.value
    clipped = np.maximum(xv, floor)
    live = xv > floor
    return _make("log", np.log(clipped), (x,), lambda g: (np.where(live, g / clipped, 0.0),))


def total(x: Node) -> Node:
    shp = x.shape
    return _make("sum", np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean(x: Node) -> Node:
    n = x.value.size
    return scale(total(x), 1.0 / n)


def weighted_sum(x: Node, weights) -> Node:
    """Scalar ``sum(weights * x)`` with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError("weighted_sum", "all", x.shape, w.shape)
    return _make("weighted_sum", np.array((w * x.value).sum()), (x,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# indexing

def pixel_rows(x: Node, flat_idx: np.ndarray) -> Node:
    """Gather pixel vectors of a [C,H,W] map at flat spatial indices -> [N,C]."""
    C = x.shape[0]
    flat = x.value.reshape(C, -1)
    idx = np.asarray(flat_idx, dtype=np.intp)
    shp = x.shape

    def grad_fn(g):
        gx = np.zeros((C, flat.shape[1]))
        np.add.at(gx.T, idx, g)
        return (gx.reshape(shp),)

    return _make("pixel_rows", flat[:, idx].T.copy(), (x,), grad_fn)


def take_cols(x: Node, idx: np.ndarray) -> Node:
    """Row-wise gather: out[r, j] = x[r, idx[r, j]]."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError("take_cols", "rows", x.shape[0], idx.shape[0])
    shp = x.shape

    def grad_fn(g):
        gx = np.zeros(shp)
        rows = np.broadcast_to(np.arange(shp[0])[:, None], idx.shape)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make("take_cols", np.take_along_axis(x.value, idx, axis=1), (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalisation and similarity

def l2_normalize(x: Node, axis: int = 0, eps: float = 1e-12) -> Node:
    """Unit-normalise along ``axis``; slices with norm <= eps pass through unchanged."""
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    y = xv / safe

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(ok, (g - y * dot) / safe, g)
        return (gx,)

    return _make("l2_normalize", y, (x,), grad_fn)


def cosine_sim(a: Node, b) -> Node:
    """Pairwise cosine similarity of rows: [N,C] x [M,C] -> [N,M]."""
    a, b = _as_node(a), _as_node(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_sim", "C", a.shape[-1], b.shape[-1])
    an = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
    bn = np.sqrt((b.value ** 2).sum(axis=1, keepdims=True))
    if np.any(an == 0) or np.any(bn == 0):
        raise NonFiniteError("cosine_sim")
    ah, bh = a.value / an, b.value / bn
    s = ah @ bh.T

    def grad_fn(g):
        # d/da of (a/|a|).bh = (bh - ah (ah.bh)) / |a|
        ga = (g @ bh - ah * (g * s).sum(axis=1, keepdims=True)) / an if a.requires_grad else None
        gb = (g.T @ ah - bh * (g * s).sum(axis=0)[:, None]) / bn if b.requires_grad else None
        return ga, gb

    return _make("cosine_sim", s, (a, b), grad_fn)


def softmax_temp(z: Node, T: float = 1.0) -> Node:
    """Row softmax of ``z / T`` along the last axis."""
    if T <= 0:
        raise GraphError(f"softmax_temp: temperature must be positive, got {T}")
    zt = z.value / T
    e = np.exp(zt - zt.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / T,)

    return _make("softmax_temp", p, (z,), grad_fn)


# ---------------------------------------------------------------------------
# image ops

def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,kh,kw] kernel."""
    x, w = _as_node(x), _as_node(w)
    if x.value.ndim != 3:
        raise ShapeError("conv2d", "rank", 3, x.value.ndim)
    if w.value.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", 4, w.value.ndim)
    cin, H, W = x.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise ShapeError("conv2d", "C_in", cin, kcin)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel", "odd", (kh, kw))
    if stride < 1 or pad < 0:
        raise GraphError(f"conv2d: bad stride/pad {stride}/{pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1:
        raise ShapeError("conv2d", "H", f">= {kh - 2 * pad}", H)
    if Wo < 1:
        raise ShapeError("conv2d", "W", f">= {kw - 2 * pad}", W)
    if b is not None:
        b = _as_node(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", "bias", (cout,), b.shape)

    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad)))
    # [cin, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    wv = w.value
    out = np.tensordot(wv, win, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b.value[:, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(wv, g, axes=([0], [0]))  # [cin, kh, kw, Ho, Wo]
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + W]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make("conv2d", out, parents, grad_fn)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    A = np.zeros((n_out, n_in))
    A[np.arange(n_out), i0] += 1.0 - lam
    A[np.arange(n_out), i1] += lam
    return A


def bilinear_upsample(x: Node, factor: int) -> Node:
    """Integer-factor bilinear upsampling of a [C,H,W] map (pixel-center sampling)."""
    if factor == 1:
        return x
    _, H, W = x.shape
    Ah, Aw = _interp_matrix(H, factor), _interp_matrix(W, factor)
    out = np.einsum("ih,chw,jw->cij", Ah, x.value, Aw, optimize=True)

    def grad_fn(g):
        return (np.einsum("ih,cij,jw->chw", Ah, g, Aw, optimize=True),)

    return _make("bilinear_upsample", out, (x,), grad_fn)


def batchnorm(x: Node, gamma: Node, beta: Node, run_mean: np.ndarray, run_var: np.ndarray,
              eps: float, mode: str):
    """Channel-wise batch normalisation of a [C,H,W] map (batch size 1).

    Returns ``(out, batch_mean, batch_var)``; the batch statistics are ``None``
    in eval mode. The running statistics are not modified here.
    """
    gamma, beta = _as_node(gamma), _as_node(beta)
    C = x.shape[0]
    for nm, arr in (("gamma", gamma.value), ("beta", beta.value), ("run_mean", run_mean), ("run_var", run_var)):
        if arr.shape != (C,):
            raise ShapeError("batchnorm", f"C ({nm})", C, arr.shape[0] if arr.ndim else arr.shape)
    gv, bv = gamma.value, beta.value
    xv = x.value
    if mode == "eval":
        denom = run_var + eps
        if np.any(denom <= 0):
            raise GraphError("batchnorm: running variance + eps must be positive")
        inv = 1.0 / np.sqrt(denom)
        xhat = (xv - run_mean[:, None, None]) * inv[:, None, None]
        out = gv[:, None, None] * xhat + bv[:, None, None]

        def grad_fn(g):
            return (g * (gv * inv)[:, None, None],
                    (g * xhat).sum(axis=(1, 2)),
                    g.sum(axis=(1, 2)))

        return _make("batchnorm", out, (x, gamma, beta), grad_fn), None, None
    if mode != "train":
        raise GraphError(f"batchnorm: unknown mode {mode!r}")
    m = xv.shape[1] * xv.shape[2]
    if m < 2:
        raise GraphError("batchnorm: train mode needs H*W >= 2")
    mu = xv.mean(axis=(1, 2))
    var = xv.var(axis=(1, 2))
    if np.any(var + eps <= 0):
        raise GraphError("batchnorm: batch variance + eps must be positive")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[:, None, None]) * inv[:, None, None]
    out = gv[:, None, None] * xhat + bv[:, None, None]

    def grad_fn(g):
        gb = g.sum(axis=(1, 2))
        gg = (g * xhat).sum(axis=(1, 2))
        gxhat = g * gv[:, None, None]
        gx = (inv[:, None, None] / m) * (
            m * gxhat - gxhat.sum(axis=(1, 2))[:, None, None]
            - xhat * (gxhat * xhat).sum(axis=(1, 2))[:, None, None])
        return gx, gg, gb

    return _make("batchnorm", out, (x, gamma, beta), grad_fn), mu, var
