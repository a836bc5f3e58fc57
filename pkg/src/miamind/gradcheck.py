"""Finite-difference verification suites for every primitive and the full block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mia_attention as mia
from .autograd import Graph, GradCheckReport, Node, grad_check
from .backbones import Model, build_mini_cnn, build_mini_segnet, model_forward

STEP = 1e-5
TOL = 1e-4
BACKBONE_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_error:.3e} tol={self.tol:.0e}"


def _dims(rng, rank, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rank))


def _uniform(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _weighted_sum(g: Graph, out: Node, rng) -> Node:
    """Contract ``out`` with fixed random weights so every output element matters."""
    return g.sum(g.mul(out, g.leaf(rng.uniform(0.5, 1.5, size=out.shape))))


def _squeeze_some(rng, shape):
    return tuple(1 if rng.random() < 0.4 else n for n in shape)


# each case returns (builder, params) for one seed
def _case_leaf(rng):
    x = _uniform(rng, _dims(rng, 3))
    w = rng.uniform(0.5, 1.5, size=x.shape)
    return lambda g, p: g.sum(g.mul(p["x"], g.leaf(w))), {"x": x}


def _case_add(rng):
    a = _dims(rng, 3)
    b = _squeeze_some(rng, a)[rng.integers(0, 2):]
    return (lambda g, p: _weighted_sum(g, g.add(p["a"], p["b"]), np.random.default_rng(0)),
            {"a": _uniform(rng, a), "b": _uniform(rng, b)})


def _case_mul(rng):
    a = _dims(rng, 3)
    b = _squeeze_some(rng, a)[rng.integers(0, 2):]
    return (lambda g, p: _weighted_sum(g, g.mul(p["a"], p["b"]), np.random.default_rng(0)),
            {"a": _uniform(rng, a), "b": _uniform(rng, b)})


def _case_matmul(rng):
    n, k, m = _dims(rng, 3)
    tb = bool(rng.integers(0, 2))
    b = _uniform(rng, (m, k) if tb else (k, m))
    return (lambda g, p: _weighted_sum(g, g.matmul(p["a"], p["b"], transpose_b=tb), np.random.default_rng(0)),
            {"a": _uniform(rng, (n, k)), "b": b})


def _case_conv2d(rng):
    n, ci, co = _dims(rng, 3)
    h, w = _dims(rng, 2)
    pad = int(rng.integers(0, 2))
    kh = int(rng.integers(1, min(h + 2 * pad, 4) + 1))
    kw = int(rng.integers(1, min(w + 2 * pad, 4) + 1))
    params = {"x": _uniform(rng, (n, ci, h, w)), "w": _uniform(rng, (co, ci, kh, kw)),
              "b": _uniform(rng, (co,))}
    return (lambda g, p: _weighted_sum(g, g.conv2d(p["x"], p["w"], p["b"], padding=pad),
                                       np.random.default_rng(0)), params)


def _case_relu(rng):
    u = _uniform(rng, _dims(rng, 3))
    x = np.sign(u) * (np.abs(u) + 0.1)
    return lambda g, p: _weighted_sum(g, g.relu(p["x"]), np.random.default_rng(0)), {"x": x}


def _case_sigmoid(rng):
    return (lambda g, p: _weighted_sum(g, g.sigmoid(p["x"]), np.random.default_rng(0)),
            {"x": _uniform(rng, _dims(rng, 3))})


def _case_reduce_mean(rng):
    shape = _dims(rng, 3)
    axes = tuple(i for i in range(3) if rng.random() < 0.5) or (int(rng.integers(0, 3)),)
    return (lambda g, p: _weighted_sum(g, g.reduce_mean(p["x"], axes), np.random.default_rng(0)),
            {"x": _uniform(rng, shape)})


def _case_reshape(rng):
    shape = _dims(rng, 3)
    return (lambda g, p: _weighted_sum(g, g.reshape(p["x"], (shape[0], -1)), np.random.default_rng(0)),
            {"x": _uniform(rng, shape)})


def _case_max_pool(rng):
    n, c = _dims(rng, 2)
    h, w = (2 * v for v in _dims(rng, 2, 1, 2))
    return (lambda g, p: _weighted_sum(g, g.max_pool(p["x"]), np.random.default_rng(0)),
            {"x": _uniform(rng, (n, c, h, w))})


def _case_softmax_ce(rng):
    n, k = _dims(rng, 2)
    labels = rng.integers(0, k, size=n)
    return lambda g, p: g.softmax_ce(p["x"], labels), {"x": _uniform(rng, (n, k))}


def _case_dice_loss(rng):
    shape = (int(rng.integers(1, 5)), 1) + _dims(rng, 2)
    target = (rng.random(shape) < 0.5).astype(float)
    return lambda g, p: g.dice_loss(p["x"], target), {"x": rng.uniform(0.05, 0.95, size=shape)}


def _case_sum(rng):
    return lambda g, p: g.sum(p["x"]), {"x": _uniform(rng, _dims(rng, 3))}


def _case_upsample(rng):
    return (lambda g, p: _weighted_sum(g, g.upsample2x(p["x"]), np.random.default_rng(0)),
            {"x": _uniform(rng, _dims(rng, 4))})


def _case_concat(rng):
    n, c1, c2, h = _dims(rng, 4)
    return (lambda g, p: _weighted_sum(g, g.concat(p["a"], p["b"], axis=1), np.random.default_rng(0)),
            {"a": _uniform(rng, (n, c1, h)), "b": _uniform(rng, (n, c2, h))})


def _case_softmax(rng):
    return (lambda g, p: _weighted_sum(g, g.softmax(p["x"]), np.random.default_rng(0)),
            {"x": _uniform(rng, _dims(rng, 2))})


PRIMITIVE_CASES: dict[str, Callable] = {
    "leaf": _case_leaf, "add": _case_add, "broadcast_mul": _case_mul, "matmul": _case_matmul,
    "conv2d": _case_conv2d, "relu": _case_relu, "sigmoid": _case_sigmoid,
    "reduce_mean": _case_reduce_mean, "reshape": _case_reshape, "max_pool": _case_max_pool,
    "softmax_ce": _case_softmax_ce, "dice_loss": _case_dice_loss, "sum": _case_sum,
    "upsample2x": _case_upsample, "concat": _case_concat, "softmax": _case_softmax,
}


def check_primitive(op: str, seed: int, step: float = STEP, tol: float = TOL) -> GradCheckReport:
    builder, params = PRIMITIVE_CASES[op](np.random.default_rng([seed, len(op)]))
    return grad_check(builder, params, step, tol)


def primitive_suite(seeds: int = 5, step: float = STEP, tol: float = TOL) -> list[SuiteResult]:
    out = []
    for op in PRIMITIVE_CASES:
        worst = max(check_primitive(op, s, step, tol).max_error for s in range(seeds))
        out.append(SuiteResult(op, worst, tol))
    return out


def mia_builder(block: mia.MiaBlock):
    """Builder for grad_check: loss = sum(X') with X and every block parameter perturbed."""
    def build(g: Graph, p: dict[str, Node]) -> Node:
        bp = {k: v for k, v in p.items() if k != "X"}
        out, _ = mia.forward_graph(p["X"], block, bp)
        return g.sum(out)
    return build


def check_mia(channels: int, size: int, seed: int, reduction: int = mia.DEFAULT_REDUCTION,
              step: float = STEP, tol: float = TOL) -> GradCheckReport:
    rng = np.random.default_rng([seed, channels, size])
    block = mia.MiaBlock.create(channels, reduction, seed=rng)
    # nonzero biases so the checked adjoints are not trivially at their init values
    block.b1 = rng.uniform(-0.5, 0.5, size=block.b1.shape)
    block.b2 = rng.uniform(-0.5, 0.5, size=block.b2.shape)
    block.conv_bias = rng.uniform(-0.5, 0.5, size=1)
    params = {"X": rng.uniform(-2.0, 2.0, size=(1, channels, size, size)), **block.parameters()}
    return grad_check(mia_builder(block), params, step, tol)


def mia_suite(channels=(2, 4, 8), sizes=(3, 5, 7), seeds: int = 3, reduction: int = mia.DEFAULT_REDUCTION,
              step: float = STEP, tol: float = TOL) -> list[SuiteResult]:
    out = []
    for c in channels:
        for s in sizes:
            worst = max(check_mia(c, s, seed, reduction, step, tol).max_error for seed in range(seeds))
            out.append(SuiteResult(f"mia C={c} H=W={s}", worst, tol))
    return out


def model_builder(model: Model, x: np.ndarray, target, loss: str):
    def build(g: Graph, p: dict[str, Node]) -> Node:
        out = model_forward(model, x, g, p)
        if loss == "dice":
            return g.dice_loss(out, target)
        return g.softmax_ce(out, target)
    return build


def check_model(model: Model, x: np.ndarray, target, loss: str, step: float = STEP,
                tol: float = BACKBONE_TOL) -> GradCheckReport:
    return grad_check(model_builder(model, x, target, loss), model.params, step, tol)


def backbone_suite(seed: int = 0, step: float = STEP, tol: float = BACKBONE_TOL) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    cnn = build_mini_cnn((3, 8, 8), 3, "mia", seed=seed)
    rep = check_model(cnn, rng.uniform(-2, 2, size=(1, 3, 8, 8)), [int(rng.integers(0, 3))],
                      "cross_entropy", step, tol)
    out = [SuiteResult("mini_cnn (1,3,8,8)", rep.max_error, tol)]
    seg = build_mini_segnet((1, 8, 8), "mia", seed=seed)
    target = (rng.random((1, 1, 8, 8)) < 0.5).astype(float)
    rep = check_model(seg, rng.uniform(-2, 2, size=(1, 1, 8, 8)), target, "dice", step, tol)
    out.append(SuiteResult("mini_segnet (1,1,8,8)", rep.max_error, tol))
    return out


def run_all(full: bool = False) -> list[SuiteResult]:
    results = primitive_suite() + mia_suite()
    if full:
        results += backbone_suite()
    return results
