"""Reverse-mode differentiation over a recorded tape.

A :class:`Graph` is built fresh for every evaluation (define-by-run). Each
primitive records its output value together with a closure that maps the
output cotangent to input cotangents. :meth:`Graph.backward` walks the tape
in reverse id order, which is a valid topological order because a node may
only reference nodes created before it.

The primitive vocabulary is fixed; every adjoint is checked against central
finite differences by :func:`grad_check` (see :mod:`miamind.gradcheck`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadShape, LabelOutOfRange, NonScalarLoss, ShapeMismatch
from .tensor import DTYPE, as_tensor, broadcast_shape, normalize_axes, unbroadcast

OP_KINDS = (
    "leaf", "add", "broadcast_mul", "matmul", "conv2d", "relu", "sigmoid",
    "reduce_mean", "reshape", "max_pool", "softmax_ce", "dice_loss",
    # needed by the segmenter and the one-hot Dice objective
    "sum", "upsample2x", "concat", "softmax",
)

# largest float64 strictly below 1.0; keeps sigmoid outputs inside (0, 1)
_ONE_MINUS = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(DTYPE).tiny)

DICE_EPS = 1.0

Vjp = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass(eq=False)
class Node:
    id: int
    op_kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    graph: "Graph" = field(repr=False)
    grad: np.ndarray | None = field(default=None, repr=False)
    vjp: Vjp | None = field(default=None, repr=False)
    name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic sigmoid without overflow, clipped to the open interval (0, 1)."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, _TINY, _ONE_MINUS)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: x (N,Ci,H,W), w (Co,Ci,kh,kw) -> (N,Co,Ho,Wo)."""
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


class Graph:
    """Append-only tape of :class:`Node` objects."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameter_ids: set[int] = set()
        self.names: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op_kind, inputs, value, vjp=None, name=None) -> Node:
        node = Node(len(self.nodes), op_kind, tuple(n.id for n in inputs),
                    np.asarray(value, dtype=DTYPE), self, vjp=vjp, name=name)
        self.nodes.append(node)
        return node

    def _own(self, *nodes: Node):
        for n in nodes:
            if not isinstance(n, Node) or n.graph is not self:
                raise ValueError("operand does not belong to this graph")

    # leaves -------------------------------------------------------------

    def leaf(self, value, name: str | None = None) -> Node:
        return self._push("leaf", (), as_tensor(value), name=name)

    def param(self, value, name: str | None = None) -> Node:
        node = self.leaf(value, name=name)
        self.parameter_ids.add(node.id)
        if name is not None:
            if name in self.names:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.names[name] = node.id
        return node

    # elementwise ---------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        broadcast_shape(a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._push("add", (a, b), a.value + b.value,
                          lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        self._own(a, b)
        broadcast_shape(a.shape, b.shape)
        av, bv = a.value, b.value
        return self._push("broadcast_mul", (a, b), av * bv,
                          lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))

    def relu(self, x: Node) -> Node:
        self._own(x)
        mask = x.value > 0
        return self._push("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))

    def sigmoid(self, x: Node) -> Node:
        self._own(x)
        s = stable_sigmoid(x.value)
        return self._push("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))

    # shape / reductions --------------------------------------------------

    def reduce_mean(self, x: Node, axes) -> Node:
        self._own(x)
        ax = normalize_axes(axes, x.value.ndim)
        shape = x.shape
        count = int(np.prod([shape[i] for i in ax], dtype=np.int64))
        kept = tuple(1 if i in ax else n for i, n in enumerate(shape))

        def vjp(g):
            return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

        return self._push("reduce_mean", (x,), np.mean(x.value, axis=ax), vjp)

    def sum(self, x: Node) -> Node:
        self._own(x)
        shape = x.shape
        return self._push("sum", (x,), np.sum(x.value),
                          lambda g: (np.full(shape, float(g)),))

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        self._own(x)
        old = x.shape
        try:
            out = x.value.reshape(tuple(shape))
        except ValueError:
            raise ShapeMismatch(f"cannot reshape {old} to {tuple(shape)}") from None
        return self._push("reshape", (x,), out.copy(), lambda g: (g.reshape(old),))

    def concat(self, a: Node, b: Node, axis: int = 1) -> Node:
        self._own(a, b)
        if a.value.ndim != b.value.ndim or any(
                i != axis and p != q for i, (p, q) in enumerate(zip(a.shape, b.shape))):
            raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape} on axis {axis}")
        split = a.shape[axis]
        return self._push("concat", (a, b), np.concatenate([a.value, b.value], axis=axis),
                          lambda g: tuple(np.split(g, [split], axis=axis)))

    # linear algebra ------------------------------------------------------

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
        self._own(a, b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ShapeMismatch("matmul expects 2-D operands")
        bm = bv.T if transpose_b else bv
        if av.shape[1] != bm.shape[0]:
            raise ShapeMismatch(f"matmul inner dims differ: {av.shape} @ {bm.shape}")

        def vjp(g):
            ga = g @ bm.T
            gb = g.T @ av if transpose_b else av.T @ g
            return ga, gb

        return self._push("matmul", (a, b), av @ bm, vjp)

    def conv2d(self, x: Node, w: Node, b: Node | None = None, padding: int = 0) -> Node:
        """Stride-1 cross-correlation with symmetric zero padding.

        x: (N, Ci, H, W); w: (Co, Ci, kh, kw); b: (Co,) or None.
        """
        ops = (x, w) if b is None else (x, w, b)
        self._own(*ops)
        xv, wv = x.value, w.value
        if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
            raise ShapeMismatch(f"conv2d: input {xv.shape} incompatible with kernel {wv.shape}")
        if b is not None and b.shape != (wv.shape[0],):
            raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({wv.shape[0]},)")
        kh, kw = wv.shape[2:]
        p = int(padding)
        xp = _pad_hw(xv, p, p)
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
        out = _correlate(xp, wv)
        if b is not None:
            out += b.value.reshape(1, -1, 1, 1)
        H, W = xv.shape[2:]

        def vjp(g):
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            flipped = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = _correlate(_pad_hw(g, kh - 1, kw - 1), flipped)
            gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W])
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        return self._push("conv2d", ops, out, vjp)

    def max_pool(self, x: Node) -> Node:
        """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
        self._own(x)
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise BadShape(f"max_pool needs even spatial extents, got {H}x{W}")
        r = x.value.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        r = r.reshape(N, C, H // 2, W // 2, 4)
        idx = np.argmax(r, axis=-1)[..., None]
        out = np.take_along_axis(r, idx, axis=-1)[..., 0]

        def vjp(g):
            g4 = np.zeros((N, C, H // 2, W // 2, 4))
            np.put_along_axis(g4, idx, g[..., None], axis=-1)
            g4 = g4.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            return (g4.reshape(N, C, H, W),)

        return self._push("max_pool", (x,), out, vjp)

    def upsample2x(self, x: Node) -> Node:
        """Nearest-neighbour 2x upsampling of the two trailing axes."""
        self._own(x)
        N, C, H, W = x.shape
        out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)
        return self._push("upsample2x", (x,), out,
                          lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),))

    # losses ----------------------------------------------------------------

    def softmax(self, x: Node) -> Node:
        self._own(x)
        z = x.value - x.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)
        return self._push("softmax", (x,), s,
                          lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))

    def softmax_ce(self, logits: Node, labels) -> Node:
        """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
        self._own(logits)
        lv = logits.value
        if lv.ndim != 2:
            raise ShapeMismatch(f"logits must be (N, K), got {lv.shape}")
        n, k = lv.shape
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if y.shape[0] != n:
            raise ShapeMismatch(f"{y.shape[0]} labels for {n} rows")
        if np.any(y < 0) or np.any(y >= k):
            raise LabelOutOfRange(f"labels must lie in [0, {k})")
        z = lv - lv.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = float(np.mean(lse - z[np.arange(n), y]))
        probs = np.exp(z - lse[:, None])

        def vjp(g):
            d = probs.copy()
            d[np.arange(n), y] -= 1.0
            return (d * (float(g) / n),)

        return self._push("softmax_ce", (logits,), np.asarray(loss), vjp)

    def dice_loss(self, pred: Node, target, eps: float = DICE_EPS) -> Node:
        """Soft Dice loss over the whole batch; ``target`` is a constant."""
        self._own(pred)
        t = np.asarray(target, dtype=DTYPE)
        if t.shape != pred.shape:
            raise ShapeMismatch(f"pred {pred.shape} vs target {t.shape}")
        p = pred.value
        inter = float(np.sum(p * t))
        denom = float(np.sum(p) + np.sum(t)) + eps
        num = 2.0 * inter + eps
        loss = 1.0 - num / denom

        def vjp(g):
            return (-(2.0 * t * denom - num) / denom ** 2 * float(g),)

        return self._push("dice_loss", (pred,), np.asarray(loss), vjp)

    # differentiation -------------------------------------------------------

    def backward(self, loss: Node | int) -> dict[int, np.ndarray]:
        """Gradients of a scalar node with respect to every parameter.

        Results are recomputed from scratch on each call, and written to
        ``node.grad`` for every node reached (``None`` elsewhere).
        """
        loss_id = loss.id if isinstance(loss, Node) else int(loss)
        root = self.nodes[loss_id]
        if root.value.size != 1:
            raise NonScalarLoss(f"loss must hold one element, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {loss_id: np.ones(root.shape)}
        for node in reversed(self.nodes[:loss_id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                gi = np.asarray(gi, dtype=DTYPE)
                grads[i] = grads[i] + gi if i in grads else gi
        for node in self.nodes:
            node.grad = grads.get(node.id)
        return {pid: grads.get(pid, np.zeros(self.nodes[pid].shape))
                for pid in sorted(self.parameter_ids)}

    def grads_by_name(self, grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: grads[i] for name, i in self.names.items()}


# finite-difference verification ------------------------------------------

Builder = Callable[[Graph, dict[str, Node]], Node]


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    step: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())


def _evaluate(builder: Builder, params: Mapping[str, np.ndarray]) -> float:
    g = Graph()
    nodes = {k: g.param(v, name=k) for k, v in params.items()}
    return float(builder(g, nodes).value)


def grad_check(builder: Builder, params: Mapping[str, np.ndarray],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences, element by element.

    ``builder(g, nodes)`` must return a scalar loss node; ``params`` maps names
    to the arrays that are perturbed (inputs may be listed here too). The
    error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: as_tensor(v) for k, v in params.items()}
    g = Graph()
    nodes = {k: g.param(v, name=k) for k, v in params.items()}
    analytic = g.grads_by_name(g.backward(builder(g, nodes)))

    errors = {}
    for name, base in params.items():
        worst = 0.0
        flat = base.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _evaluate(builder, params)
            flat[i] = orig - step
            fm = _evaluate(builder, params)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(an[i]), abs(num), 1e-8)
            worst = max(worst, abs(an[i] - num) / denom)
        errors[name] = worst
    return GradCheckReport(errors, tol, step)
