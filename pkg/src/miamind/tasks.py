"""Task registry: which data, host network and loss each CLI ``--task`` uses."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import data_io
from .backbones import Model, build_flow_cnn, build_mini_cnn, build_mini_segnet
from .data_io import Dataset
from .errors import ConfigError

TASKS = ("synth-cls", "synth-seg", "cifar", "flows")
TEST_SEED_OFFSET = 7919
SYNTH_CLASSES = 4
DEFAULT_N = {"synth-cls": 256, "synth-seg": 128, "cifar": None, "flows": None}


@dataclass
class TaskData:
    name: str
    train: Dataset
    test: Dataset
    build: Callable[..., Model]
    loss: str


def prepare(task: str, seed: int = 0, n: int | None = None, noise: float = 0.1,
            data_dir=None, csv_path=None, label_column: str = "Label") -> TaskData:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if n is None:
        n = DEFAULT_N[task]
    test_seed = seed + TEST_SEED_OFFSET

    if task == "synth-cls":
        train = data_io.synth_blobs(n, SYNTH_CLASSES, seed, noise)
        test = data_io.synth_blobs(n, SYNTH_CLASSES, test_seed, noise, split="test")
        build = lambda variant, r, s, bias=True: build_mini_cnn((3, 16, 16), SYNTH_CLASSES, variant, r, s, bias)
        return TaskData(task, train, test, build, "cross_entropy")

    if task == "synth-seg":
        train = data_io.synth_masks(n, 16, 16, seed, noise)
        test = data_io.synth_masks(max(n // 4, 16), 16, 16, test_seed, noise, split="test")
        build = lambda variant, r, s, bias=True: build_mini_segnet((1, 16, 16), variant, r, s, bias)
        return TaskData(task, train, test, build, "dice")

    if task == "cifar":
        root = Path(data_dir) if data_dir else data_io.data_root()
        train = data_io.load_cifar10(root, "train", n)
        test = data_io.load_cifar10(root, "test", n, stats=(train.mean, train.std))
        build = lambda variant, r, s, bias=True: build_mini_cnn((3, 32, 32), 10, variant, r, s, bias)
        return TaskData(task, train, test, build, "cross_entropy")

    if csv_path is None:
        raise ConfigError("--task flows needs --csv PATH")
    x, y, skipped, cols = data_io.read_flows_csv(csv_path, label_column)
    if n is not None:
        x, y = x[:n], y[:n]
    tr, te = data_io.holdout_split(len(y), 0.2, seed)
    if len(te) == 0:
        tr = te = np.arange(len(y))
    stats = data_io.column_stats(x[tr])
    train = data_io.flows_dataset(x[tr], y[tr], stats, "train", skipped, cols)
    test = data_io.flows_dataset(x[te], y[te], stats, "test", skipped, cols)
    features = x.shape[1]
    build = lambda variant, r, s, bias=True: build_flow_cnn(features, 2, variant, r, s, bias)
    return TaskData(task, train, test, build, "cross_entropy")
