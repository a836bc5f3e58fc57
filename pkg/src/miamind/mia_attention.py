"""Multidimensional interactive attention block.

Pipeline for a feature map X of shape (N, C, H, W):

    z  = mean of X over (H, W)                       -> (N, C)
    M  = mean of X over C                            -> (N, H, W)
    wc = sigmoid(W2 relu(W1 z + b1) + b2)            -> (N, C)
    ws = sigmoid(conv7x7(M) + conv_bias)             -> (N, H, W)
    A  = wc[:, :, None, None] * ws[:, None, :, :]    -> (N, C, H, W)
    X' = X * A

Every stage accepts either a numpy array (evaluated eagerly, returns an
array) or a :class:`~miamind.autograd.Node` (recorded on that node's graph,
returns a node).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Graph, Node
from .errors import ShapeMismatch
from .tensor import DTYPE, as_tensor

KERNEL = 7
PADDING = 3
DEFAULT_REDUCTION = 16


def bottleneck_width(channels: int, reduction: int) -> int:
    """Hidden width of the channel MLP: C/r, or max(1, round-half-up(C/r)) when r does not divide C."""
    if channels < 1 or reduction < 1:
        raise ValueError("channels and reduction must be positive")
    if channels % reduction == 0:
        return channels // reduction
    return max(1, math.floor(channels / reduction + 0.5))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class MiaBlock:
    """Parameters of one attention block.

    ``b1``/``b2`` are ``None`` in no-bias mode; ``conv_kernel``/``conv_bias``
    are ``None`` when the spatial branch is frozen (ws == 1).
    """

    channels: int
    reduction: int
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None
    conv_kernel: np.ndarray | None = None
    conv_bias: np.ndarray | None = None

    def __post_init__(self):
        hidden = bottleneck_width(self.channels, self.reduction)
        C = self.channels
        expect = {"W1": (hidden, C), "W2": (C, hidden), "b1": (hidden,), "b2": (C,),
                  "conv_kernel": (1, 1, KERNEL, KERNEL), "conv_bias": (1,)}
        for name, shape in expect.items():
            v = getattr(self, name)
            if v is None:
                continue
            v = as_tensor(v)
            if v.shape != shape:
                raise ShapeMismatch(f"{name} has shape {v.shape}, expected {shape}")
            setattr(self, name, v)
        if (self.conv_kernel is None) != (self.conv_bias is None):
            raise ShapeMismatch("conv_kernel and conv_bias must be given together")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def spatial(self) -> bool:
        return self.conv_kernel is not None

    @classmethod
    def create(cls, channels: int, reduction: int = DEFAULT_REDUCTION, seed=0,
               bias: bool = True, spatial: bool = True) -> "MiaBlock":
        """Glorot-uniform weights, zero biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        h = bottleneck_width(channels, reduction)
        block = cls(
            channels, reduction,
            W1=glorot_uniform(rng, (h, channels), channels, h),
            W2=glorot_uniform(rng, (channels, h), h, channels),
        )
        if bias:
            block.b1, block.b2 = np.zeros(h), np.zeros(channels)
        if spatial:
            block.conv_kernel = glorot_uniform(rng, (1, 1, KERNEL, KERNEL), KERNEL ** 2, KERNEL ** 2)
            block.conv_bias = np.zeros(1)
        return block

    @classmethod
    def zeros(cls, channels: int, reduction: int = DEFAULT_REDUCTION) -> "MiaBlock":
        h = bottleneck_width(channels, reduction)
        return cls(channels, reduction, W1=np.zeros((h, channels)), W2=np.zeros((channels, h)),
                   b1=np.zeros(h), b2=np.zeros(channels),
                   conv_kernel=np.zeros((1, 1, KERNEL, KERNEL)), conv_bias=np.zeros(1))

    def parameters(self) -> dict[str, np.ndarray]:
        names = ("W1", "b1", "W2", "b2", "conv_kernel", "conv_bias")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def bind(self, g: Graph, prefix: str = "") -> dict[str, Node]:
        """Register the block's arrays as trainable leaves of ``g``."""
        return {k: g.param(v, name=prefix + k) for k, v in self.parameters().items()}


@dataclass
class AttentionMaps:
    z: np.ndarray
    M: np.ndarray
    wc: np.ndarray
    ws: np.ndarray
    A: np.ndarray = field(repr=False)


def param_count(block: MiaBlock) -> int:
    return sum(v.size for v in block.parameters().values())


# stage functions -------------------------------------------------------------

def _lift(x) -> tuple[Graph, Node, bool]:
    if isinstance(x, Node):
        return x.graph, x, False
    g = Graph()
    return g, g.leaf(x), True


def _out(node: Node, eager: bool):
    return node.value if eager else node


def _require_rank(node: Node, rank: int, what: str):
    if node.value.ndim != rank:
        raise ShapeMismatch(f"{what} must be {rank}-D, got shape {node.shape}")


def channel_descriptor(X):
    """Global average pool over the spatial axes: (N, C, H, W) -> (N, C)."""
    g, x, eager = _lift(X)
    _require_rank(x, 4, "X")
    return _out(g.reduce_mean(x, (2, 3)), eager)


def spatial_descriptor(X):
    """Average over channels: (N, C, H, W) -> (N, H, W)."""
    g, x, eager = _lift(X)
    _require_rank(x, 4, "X")
    return _out(g.reduce_mean(x, 1), eager)


def channel_weights(z, block: MiaBlock, params: dict[str, Node] | None = None):
    g, zn, eager = _lift(z)
    _require_rank(zn, 2, "z")
    if zn.shape[1] != block.channels:
        raise ShapeMismatch(f"z has {zn.shape[1]} channels, block expects {block.channels}")
    p = params if params is not None else block.bind(g)
    h = g.matmul(zn, p["W1"], transpose_b=True)
    if "b1" in p:
        h = g.add(h, p["b1"])
    h = g.relu(h)
    s = g.matmul(h, p["W2"], transpose_b=True)
    if "b2" in p:
        s = g.add(s, p["b2"])
    return _out(g.sigmoid(s), eager)


def spatial_weights(M, block: MiaBlock, params: dict[str, Node] | None = None):
    """sigmoid(conv7x7(M) + bias) with zero padding 3, so ws has M's shape.

    With the spatial branch frozen the result is all ones.
    """
    g, m, eager = _lift(M)
    _require_rank(m, 3, "M")
    n, H, W = m.shape
    if not block.spatial:
        return _out(g.leaf(np.ones((n, H, W))), eager)
    p = params if params is not None else block.bind(g)
    m4 = g.reshape(m, (n, 1, H, W))
    pre = g.conv2d(m4, p["conv_kernel"], p["conv_bias"], padding=PADDING)
    return _out(g.reshape(g.sigmoid(pre), (n, H, W)), eager)


def fuse_attention(wc, ws):
    """Outer product per sample: A[n, c, i, j] = wc[n, c] * ws[n, i, j]."""
    if isinstance(wc, Node) or isinstance(ws, Node):
        g = wc.graph if isinstance(wc, Node) else ws.graph
        wcn = wc if isinstance(wc, Node) else g.leaf(wc)
        wsn = ws if isinstance(ws, Node) else g.leaf(ws)
        eager = False
    else:
        g = Graph()
        wcn, wsn, eager = g.leaf(wc), g.leaf(ws), True
    _require_rank(wcn, 2, "wc")
    _require_rank(wsn, 3, "ws")
    if wcn.shape[0] != wsn.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {wcn.shape[0]} vs {wsn.shape[0]}")
    n, C = wcn.shape
    _, H, W = wsn.shape
    A = g.mul(g.reshape(wcn, (n, C, 1, 1)), g.reshape(wsn, (n, 1, H, W)))
    return _out(A, eager)


def apply_attention(X, A):
    """Recalibrate features elementwise: X' = X * A (shapes must match exactly)."""
    if isinstance(X, Node) or isinstance(A, Node):
        g = X.graph if isinstance(X, Node) else A.graph
        xn = X if isinstance(X, Node) else g.leaf(X)
        an = A if isinstance(A, Node) else g.leaf(A)
        eager = False
    else:
        g = Graph()
        xn, an, eager = g.leaf(X), g.leaf(A), True
    if xn.shape != an.shape:
        raise ShapeMismatch(f"X {xn.shape} and A {an.shape} differ")
    return _out(g.mul(xn, an), eager)


def forward_graph(x: Node, block: MiaBlock, params: dict[str, Node] | None = None
                  ) -> tuple[Node, dict[str, Node]]:
    """Record the full block on ``x.graph``; returns (X', intermediate nodes)."""
    g = x.graph
    _require_rank(x, 4, "X")
    if x.shape[1] != block.channels:
        raise ShapeMismatch(f"X has {x.shape[1]} channels, block expects {block.channels}")
    p = params if params is not None else block.bind(g)
    z = channel_descriptor(x)
    M = spatial_descriptor(x)
    wc = channel_weights(z, block, p)
    ws = spatial_weights(M, block, p)
    A = fuse_attention(wc, ws)
    out = apply_attention(x, A)
    return out, {"z": z, "M": M, "wc": wc, "ws": ws, "A": A}


def forward(X, block: MiaBlock) -> tuple[np.ndarray, AttentionMaps]:
    """Eager forward pass returning X' and all intermediate maps."""
    g = Graph()
    out, maps = forward_graph(g.leaf(X), block)
    return out.value, AttentionMaps(**{k: v.value for k, v in maps.items()})


# PGM export ----------------------------------------------------------------

def to_pgm(image: np.ndarray) -> bytes:
    """Binary 8-bit PGM; values in [0, 1] map linearly onto 0..255."""
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim != 2:
        raise ShapeMismatch(f"PGM export needs a 2-D map, got {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes(order="C")


def write_pgm(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(to_pgm(image))
    return path


def read_pgm(path) -> np.ndarray:
    """Read back a PGM written by :func:`write_pgm`."""
    data = Path(path).read_bytes()
    end = 0
    for _ in range(3):
        end = data.index(b"\n", end) + 1
    magic, dims, maxval = data[:end].split(b"\n")[:3]
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(data[end:end + w * h], dtype=np.uint8).reshape(h, w)
