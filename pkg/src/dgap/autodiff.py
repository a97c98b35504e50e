"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is an append-only list of :class:`Node` records. Each
primitive computes its value eagerly and stores a vector-Jacobian closure;
:meth:`Graph.backward` walks the tape once in reverse and accumulates
gradients by plain addition.

Image-shaped primitives accept either ``C x H x W`` or a leading batch
dimension ``N x C x H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Node",
    "Graph",
    "matmul",
    "conv2d",
    "relu",
    "avgpool2",
    "add",
    "scale",
    "flatten",
    "total",
    "softmax_cross_entropy",
    "conv2d_reference",
]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


VJP = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    value: np.ndarray
    op: str
    inputs: tuple[int, ...] = ()
    vjp: VJP | None = None
    leaf: bool = False
    name: str | None = None
    requires_grad: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(eq=False)
class Graph:
    nodes: list[Node] = field(default_factory=list)
    _consumed: bool = False

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        arr = np.array(value, dtype=np.float64)
        node = self._push(arr, "leaf", (), None, leaf=True, name=name)
        node.requires_grad = requires_grad
        return node

    def _push(self, value, op, inputs, vjp, leaf=False, name=None) -> Node:
        node = Node(self, len(self.nodes), value, op, tuple(inputs), vjp, leaf, name)
        if inputs:
            node.requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` for every node that feeds it, keyed by node id."""
        if loss.graph is not self:
            raise ContractError("loss node belongs to a different graph")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        if self._consumed:
            raise ContractError("backward already ran on this graph")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.nodes[src].requires_grad:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return grads


def _graph_of(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ContractError("operands belong to different graphs")
    return g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Node, b: Node) -> Node:
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    out = A @ B

    def vjp(g):
        return (g @ B.T if a.requires_grad else None), (A.T @ g if b.requires_grad else None)

    return _graph_of(a, b)._push(out, "matmul", (a.id, b.id), vjp)


def _columns(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N, C*9, H*W); row order (c, di, dj) matches kernel.reshape(F, C*9)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    shifted = [xp[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)]
    return np.stack(shifted, axis=2).reshape(n, c * 9, h * w)


def _conv_cols(cols: np.ndarray, k: np.ndarray, h: int, w: int) -> np.ndarray:
    f = k.shape[0]
    return (k.reshape(f, -1) @ cols).reshape(cols.shape[0], f, h, w)


def conv2d(x: Node, k: Node) -> Node:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    X, K = x.value, k.value
    if K.ndim != 4 or K.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be F x C x 3 x 3, got {K.shape}")
    batched = X.ndim == 4
    if X.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be C x H x W or N x C x H x W, got {X.shape}")
    Xb = X if batched else X[None]
    if Xb.shape[1] != K.shape[1]:
        raise DimensionError(
            f"conv2d: input has {Xb.shape[1]} channels, kernel {K.shape} expects {K.shape[1]}"
        )
    h, w = Xb.shape[2:]
    cols = _columns(Xb)
    out = _conv_cols(cols, K, h, w)

    def vjp(g):
        gb = g if batched else g[None]
        n, f = gb.shape[:2]
        gk = gx = None
        if k.requires_grad:
            gk = (gb.reshape(n, f, h * w) @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(K.shape)
        if x.requires_grad:
            k_flip = np.ascontiguousarray(K[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_cols(_columns(gb), k_flip, h, w)
            if not batched:
                gx = gx[0]
        return gx, gk

    return _graph_of(x, k)._push(out if batched else out[0], "conv2d", (x.id, k.id), vjp)


def conv2d_reference(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Direct loop convolution, used as a test oracle."""
    c, h, w = x.shape
    f = k.shape[0]
    out = np.zeros((f, h, w))
    for o in range(f):
        for i in range(h):
            for j in range(w):
                s = 0.0
                for ch in range(c):
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                s += x[ch, ii, jj] * k[o, ch, di, dj]
                out[o, i, j] = s
    return out


def relu(x: Node) -> Node:
    X = x.value
    mask = X > 0
    return x.graph._push(np.maximum(X, 0.0), "relu", (x.id,), lambda g: (g * mask,))


def _pool_counts(h: int, w: int) -> np.ndarray:
    ch = np.full((h + 1) // 2, 2.0)
    cw = np.full((w + 1) // 2, 2.0)
    if h % 2:
        ch[-1] = 1.0
    if w % 2:
        cw[-1] = 1.0
    return np.outer(ch, cw)


def avgpool2(x: Node) -> Node:
    """2x2 mean pooling; odd trailing rows/cols average over the entries present."""
    X = x.value
    if X.ndim < 3:
        raise DimensionError(f"avgpool2: expected at least 3 dims, got {X.shape}")
    h, w = X.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        X = np.pad(X, [(0, 0)] * (X.ndim - 2) + [(0, ph), (0, pw)])
    counts = _pool_counts(h, w)
    out = X[..., ::2, ::2] + X[..., 1::2, ::2]
    out += X[..., ::2, 1::2]
    out += X[..., 1::2, 1::2]
    out /= counts
    lead = X.shape[:-2]
    H2, W2 = out.shape[-2:]

    def vjp(g):
        gc = g / counts
        up = np.empty(lead + (H2, 2, W2, 2))
        up[...] = gc[..., :, None, :, None]
        return (up.reshape(lead + (2 * H2, 2 * W2))[..., :h, :w],)

    return x.graph._push(out, "avgpool2", (x.id,), vjp)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum with numpy broadcasting (used for biases)."""
    A, B = a.value, b.value
    try:
        out = A + B
    except ValueError as exc:
        raise DimensionError(f"add: shapes {A.shape} and {B.shape} do not broadcast") from exc

    def vjp(g):
        return _unbroadcast(g, A.shape), _unbroadcast(g, B.shape)

    return _graph_of(a, b)._push(out, "add", (a.id, b.id), vjp)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.graph._push(x.value * c, "scale", (x.id,), lambda g: (g * c,))


def flatten(x: Node, batched: bool = False) -> Node:
    """Flatten to 1-D, or to ``N x rest`` when ``batched``."""
    shape = x.value.shape
    out = x.value.reshape(shape[0], -1) if batched else x.value.reshape(-1)
    return x.graph._push(out, "flatten", (x.id,), lambda g: (g.reshape(shape),))


def total(x: Node) -> Node:
    shape = x.value.shape
    return x.graph._push(
        np.array(x.value.sum()), "sum", (x.id,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def softmax_cross_entropy(logits: Node, label) -> Node:
    """Cross-entropy via max-shifted log-sum-exp.

    ``logits`` of shape ``K`` take an int label; shape ``B x K`` take a label
    array and return the mean loss over the batch.
    """
    Z = logits.value
    single = Z.ndim == 1
    Zb = Z[None] if single else Z
    if Zb.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be K or B x K, got {Z.shape}")
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (Zb.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise DimensionError(f"softmax_cross_entropy: need {Zb.shape[0]} integer labels")
    k = Zb.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range for {k} classes: {labels.tolist()}")
    rows = np.arange(Zb.shape[0])
    m = Zb.max(axis=1, keepdims=True)
    e = np.exp(Zb - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    losses = lse - Zb[rows, labels]
    n = Zb.shape[0]
    out = np.array(losses.mean())

    def vjp(g):
        p = e / s
        p[rows, labels] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return logits.graph._push(out, "softmax_xent", (logits.id,), vjp)
