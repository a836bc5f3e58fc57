"""Losses, Adam with cosine annealing, and the training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import DICE_EPS, Graph, Node
from .backbones import Model, bind_params, model_forward, predict
from .data_io import Dataset, shuffled_batches
from .errors import ConfigError, EmptyDataset, ShapeMismatch
from .metrics import classification_report, dice_coefficient, segmentation_report, MetricReport

LOSS_KINDS = ("cross_entropy", "dice", "dice_onehot")


@dataclass
class TrainConfig:
    lr_init: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    lr_min: float = 0.0
    loss_kind: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if not self.lr_init > self.lr_min >= 0:
            raise ConfigError(f"need lr_init > lr_min >= 0, got {self.lr_init}, {self.lr_min}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


# losses ---------------------------------------------------------------------------

def _lift(g: Graph, x) -> Node:
    return x if isinstance(x, Node) else g.leaf(x)


def dice_loss(pred, target, g: Graph | None = None, eps: float = DICE_EPS):
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over the whole batch.

    Returns a float for array input, a node when ``pred`` is a node.
    """
    eager = not isinstance(pred, Node)
    g = pred.graph if not eager else (g or Graph())
    out = g.dice_loss(_lift(g, pred), target, eps)
    return float(out.value) if eager else out


def cross_entropy_loss(logits, labels, g: Graph | None = None):
    eager = not isinstance(logits, Node)
    g = logits.graph if not eager else (g or Graph())
    out = g.softmax_ce(_lift(g, logits), labels)
    return float(out.value) if eager else out


def dice_onehot_loss(logits: Node, labels) -> Node:
    """Dice between softmax probabilities and one-hot targets."""
    g = logits.graph
    probs = g.softmax(logits)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(onehot)), np.asarray(labels, dtype=np.int64)] = 1.0
    return g.dice_loss(probs, onehot)


def compute_loss(output: Node, target, loss_kind: str) -> Node:
    if loss_kind == "cross_entropy":
        return output.graph.softmax_ce(output, target)
    if loss_kind == "dice_onehot":
        return dice_onehot_loss(output, target)
    return output.graph.dice_loss(output, target)


# schedule and optimizer ----------------------------------------------------------

def cosine_lr(t: int, total: int, lr_init: float, lr_min: float = 0.0) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is updated in place."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names do not match parameter names")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    new = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


# loop -------------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    acc: float | None = None
    dice: float | None = None

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"step={self.step}", f"lr={self.lr:.6g}", f"loss={self.loss:.6f}"]
        if self.acc is not None:
            parts.append(f"acc={self.acc:.6f}")
        if self.dice is not None:
            parts.append(f"dice={self.dice:.6f}")
        return " ".join(parts)


def train_step(model: Model, x: np.ndarray, y, loss_kind: str) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    g = Graph()
    nodes = bind_params(model, g)
    out = model_forward(model, x, g, nodes)
    loss = compute_loss(out, y, loss_kind)
    grads = g.backward(loss)
    return float(loss.value), {k: grads[n.id] for k, n in nodes.items()}, out.value


def train_loop(model: Model, data: Dataset, cfg: TrainConfig,
               log: Callable[[str], None] | None = None) -> list[EpochRecord]:
    """Train ``model`` in place; returns one record per epoch.

    Cosine annealing runs per step over ``epochs * steps_per_epoch``; batch
    order comes from a generator seeded with ``cfg.seed``.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    segmentation = data.task == "segmentation"
    records = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, seen = 0.0, 0
        correct, inter, psum = 0, 0.0, 0.0
        lr = cfg.lr_init
        for idx in shuffled_batches(n, cfg.batch_size, rng):
            x, y = data.inputs[idx], data.targets[idx]
            lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_min)
            loss, grads, out = train_step(model, x, y, cfg.loss_kind)
            model.params, state = adam_step(model.params, grads, state, lr)
            step += 1
            loss_sum += loss * len(idx)
            seen += len(idx)
            if segmentation:
                pm = out >= 0.5
                inter += float(np.sum(pm * y))
                psum += float(pm.sum() + y.sum())
            else:
                correct += int(np.sum(np.argmax(out, axis=1) == y))
        rec = EpochRecord(epoch, step, lr, loss_sum / seen)
        if segmentation:
            rec.dice = 2.0 * inter / psum if psum > 0 else 1.0
        else:
            rec.acc = correct / seen
        records.append(rec)
        if log is not None:
            log(rec.line())
    return records


def evaluate(model: Model, data: Dataset) -> MetricReport:
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    out = predict(model, data.inputs)
    if data.task == "segmentation":
        return segmentation_report(out, data.targets)
    return classification_report(np.argmax(out, axis=1), data.targets, data.classes)


def mask_dice(model: Model, data: Dataset) -> float:
    prob = predict(model, data.inputs)
    return dice_coefficient((prob >= 0.5).astype(np.int64), data.targets)
