"""Exit criteria of the build, one test per criterion.

Each test records a PASS/FAIL line shown in the pytest terminal summary.
"""
import os
import statistics
import time

import numpy as np
import pytest

from miamind import gradcheck
from miamind import mia_attention as mia
from miamind.backbones import attention_param_count, build_mini_cnn, build_mini_segnet, param_count
from miamind.data_io import (
    Dataset, channel_stats, encode_checkpoint, load_checkpoint, load_cifar10,
    parse_cifar_records, save_checkpoint, standardize, synth_blobs, synth_masks,
)
from miamind.errors import ChecksumMismatch, TruncatedRecord
from miamind.metrics import (
    accuracy, binary_counts, confusion_counts, dice_coefficient, precision_recall_f1,
)
from miamind.train import TrainConfig, evaluate, train_loop

pytestmark = pytest.mark.acceptance


def test_1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    results = gradcheck.primitive_suite(seeds=5, step=1e-5, tol=1e-4)
    results += gradcheck.mia_suite(channels=(2, 4, 8), sizes=(3, 5, 7), seeds=3, step=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results) and worst <= 1e-4 and elapsed < 120
    criterion(ok, f"{len(results)} suites, max_rel_err={worst:.2e} (<=1e-4), {elapsed:.1f}s (<120s)")
    assert ok, [r.line() for r in results if not r.passed]


def test_2_attention_structure(criterion):
    rng = np.random.default_rng(2024)
    bounds = ratio = zero = True
    worst_ratio = worst_zero = 0.0
    for _ in range(100):
        C = int(rng.integers(1, 17))
        H, W = (int(v) for v in rng.integers(1, 10, size=2))
        block = mia.MiaBlock.create(C, int(rng.integers(1, 9)), seed=rng)
        block.b1 = rng.normal(size=block.b1.shape)
        block.b2 = rng.normal(size=block.b2.shape)
        block.conv_bias = rng.normal(size=1)
        X = rng.normal(scale=float(rng.uniform(0.1, 5.0)), size=(int(rng.integers(1, 4)), C, H, W))
        out, m = mia.forward(X, block)
        bounds &= bool(np.all(m.A > 0) and np.all(m.A < 1) and np.all(m.wc > 0) and np.all(m.wc < 1)
                       and np.all(m.ws > 0) and np.all(m.ws < 1))
        F = m.A.reshape(m.A.shape[0], C, H * W)
        lhs = F[:, :, None, :, None] * F[:, None, :, None, :]
        rhs = F[:, :, None, None, :] * F[:, None, :, :, None]
        worst_ratio = max(worst_ratio, float(np.max(np.abs(lhs - rhs))))
        out0, _ = mia.forward(X, mia.MiaBlock.zeros(C, block.reduction))
        worst_zero = max(worst_zero, float(np.max(np.abs(out0 - 0.25 * X))))
    ratio = worst_ratio <= 1e-10
    zero = worst_zero <= 1e-12
    ok = bounds and ratio and zero
    criterion(ok, f"(a) open interval={bounds} (b) cross-ratio err={worst_ratio:.1e} (<=1e-10) "
                  f"(c) zero-param err={worst_zero:.1e} (<=1e-12)")
    assert ok


def _loop_metrics(pred, truth, K, positive=None):
    per = []
    for c in range(K):
        tp = fp = fn = 0
        for p, t in zip(pred, truth):
            tp += p == c and t == c
            fp += p == c and t != c
            fn += p != c and t == c
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per.append((prec, rec, 2 * prec * rec / (prec + rec) if prec + rec else 0.0))
    acc = sum(p == t for p, t in zip(pred, truth)) / len(pred)
    if positive is not None:
        return (acc,) + per[positive]
    return (acc,) + tuple(sum(x[i] for x in per) / K for i in range(3))


def _loop_dice(a, b):
    inter = sum(int(x and y) for x, y in zip(a, b))
    tot = sum(a) + sum(b)
    return 1.0 if tot == 0 else 2 * inter / tot


def test_3_metric_oracle_equivalence(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 60))
        for K, mode in ((2, "binary"), (10, "macro")):
            pred, truth = rng.integers(0, K, n), rng.integers(0, K, n)
            cc = confusion_counts(pred, truth, K)
            got = (accuracy(cc),) + precision_recall_f1(cc, mode)
            ref = _loop_metrics(pred.tolist(), truth.tolist(), K, 1 if mode == "binary" else None)
            worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
        a, b = rng.integers(0, 2, n), rng.integers(0, 2, n)
        worst = max(worst, abs(dice_coefficient(a, b) - _loop_dice(a.tolist(), b.tolist())))
    hand = (
        precision_recall_f1(binary_counts(1, 1, 1, 0), "binary") == (0.5, 0.5, 0.5)
        and accuracy(binary_counts(1, 1, 1, 1)) == 0.5
        and precision_recall_f1(binary_counts(2, 0, 0, 0), "binary") == (1.0, 1.0, 1.0)
        and dice_coefficient([1, 1, 0, 0], [1, 1, 1, 1]) == 2 / 3
        and dice_coefficient([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0
    )
    ok = worst <= 1e-12 and hand
    criterion(ok, f"max |lib - loop| = {worst:.1e} (<=1e-12) over 1000 instances; hand cases exact={hand}")
    assert ok


def test_4a_trainability_classification(criterion):
    t0 = time.perf_counter()
    train = synth_blobs(256, 4, seed=0)
    test = synth_blobs(256, 4, seed=1, split="test")
    model = build_mini_cnn((3, 16, 16), 4, "mia", seed=0)
    train_loop(model, train, TrainConfig(epochs=5))
    acc = evaluate(model, test).accuracy
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and elapsed < 300
    criterion(ok, f"held-out accuracy={acc:.4f} (>=0.95), {elapsed:.1f}s (<300s)")
    assert ok


def test_4b_trainability_segmentation(criterion):
    t0 = time.perf_counter()
    train = synth_masks(128, 16, 16, seed=0)
    test = synth_masks(64, 16, 16, seed=1, split="test")
    model = build_mini_segnet((1, 16, 16), "mia", seed=0)
    train_loop(model, train, TrainConfig(epochs=10, loss_kind="dice"))
    dice = evaluate(model, test).dice
    elapsed = time.perf_counter() - t0
    ok = dice >= 0.9 and elapsed < 300
    criterion(ok, f"held-out Dice={dice:.4f} (>=0.9), {elapsed:.1f}s (<300s)")
    assert ok


def _overfit_subset():
    root = os.environ.get("MIA_DATA_DIR")
    if root:
        try:
            return load_cifar10(root, "train", limit=32), "CIFAR-10"
        except Exception:
            pass
    rng = np.random.default_rng(5)
    x = rng.uniform(0.0, 1.0, size=(32, 3, 32, 32))
    mean, std = channel_stats(x)
    y = rng.permutation(np.arange(32) % 10)
    return Dataset(standardize(x, mean, std), y, "train", "classification", 10, mean, std), "synthetic noise, random labels"


def test_5_overfit_sanity(criterion):
    data, source = _overfit_subset()
    model = build_mini_cnn((3, 32, 32), 10, "mia", seed=0)
    records = train_loop(model, data, TrainConfig(epochs=100, seed=0))
    acc = evaluate(model, data).accuracy
    ok = acc == 1.0
    first = next((r.epoch for r in records if r.acc == 1.0), None)
    criterion(ok, f"{source}: final train accuracy={acc:.4f} (==1.0), first perfect epoch={first}")
    assert ok


def test_6_ablation_direction(criterion):
    accs = {"mia": [], "none": []}
    for seed in range(3):
        train = synth_blobs(512, 4, seed=seed, noise=0.3)
        test = synth_blobs(512, 4, seed=seed + 7919, noise=0.3, split="test")
        for variant in accs:
            model = build_mini_cnn((3, 16, 16), 4, variant, seed=seed)
            train_loop(model, train, TrainConfig(seed=seed))
            accs[variant].append(evaluate(model, test).accuracy)
    med = {k: statistics.median(v) for k, v in accs.items()}
    ok = med["mia"] >= med["none"]
    criterion(ok, f"median test accuracy mia={med['mia']:.4f} none={med['none']:.4f} "
                  f"(per seed mia={accs['mia']}, none={accs['none']})")
    assert ok


def test_7_lightweightness_audit(criterion):
    rng = np.random.default_rng(7)
    formula_ok = True
    for _ in range(10):
        C, r = int(rng.integers(1, 257)), int(rng.integers(1, 33))
        h = C // r if C % r == 0 else max(1, int(np.floor(C / r + 0.5)))
        expected = 2 * C * h + h + C + 49 + 1
        formula_ok &= mia.param_count(mia.MiaBlock.create(C, r, seed=rng)) == expected
    fractions = []
    for shape, K in (((3, 16, 16), 4), ((3, 32, 32), 10)):
        m = build_mini_cnn(shape, K, "mia")
        fractions.append(attention_param_count(m) / param_count(m))
    ok = formula_ok and max(fractions) < 0.05
    criterion(ok, f"formula matches 10 random (C, r)={formula_ok}; attention share "
                  f"{', '.join(f'{f:.2%}' for f in fractions)} (<5%)")
    assert ok


def test_8_persistence_and_determinism(criterion, tmp_path):
    data = synth_blobs(64, 4, seed=8)
    blobs = []
    for i in range(2):
        m = build_mini_cnn((3, 16, 16), 4, "mia", seed=8)
        train_loop(m, data, TrainConfig(epochs=2, seed=8))
        blobs.append(save_checkpoint(m, tmp_path / f"run{i}.ckpt").read_bytes())
    same_runs = blobs[0] == blobs[1]
    back = load_checkpoint(tmp_path / "run0.ckpt")
    round_trip = encode_checkpoint(back) == blobs[0] and all(
        back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    bad = bytearray(blobs[0])
    bad[100] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
    try:
        load_checkpoint(tmp_path / "bad.ckpt")
        rejected = False
    except ChecksumMismatch:
        rejected = True
    ok = same_runs and round_trip and rejected
    criterion(ok, f"round-trip bitwise={round_trip}, identical seeded runs={same_runs}, corruption rejected={rejected}")
    assert ok


def test_9_cifar_format_fidelity(criterion):
    rng = np.random.default_rng(9)
    labels = [3, 7, 0, 9]
    pix = [rng.integers(0, 256, 3072, dtype=np.uint8) for _ in labels]
    blob = b"".join(bytes([l]) + p.tobytes() for l, p in zip(labels, pix))
    y, x = parse_cifar_records(blob)
    exact = y.tolist() == labels and all(
        np.array_equal(x[i, c], p[1024 * c:1024 * (c + 1)].reshape(32, 32))
        for i, p in enumerate(pix) for c in range(3))
    truncated = 0
    for n in (len(blob) - 1, len(blob) + 1, 3072, 1):
        try:
            parse_cifar_records(blob[:n] if n < len(blob) else blob + b"\x00")
        except TruncatedRecord:
            truncated += 1
    ok = exact and truncated == 4
    criterion(ok, f"exact pixel/label recovery={exact}; malformed lengths rejected {truncated}/4")
    assert ok
