"""Datasets (CIFAR-10 binary, synthetic stand-ins, flow CSV), batching and checkpoints."""
from __future__ import annotations

import csv
import io
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import Model, build_model
from .errors import (
    BadMagic, ChecksumMismatch, EmptyDataset, LabelOutOfRange, MissingFile,
    MissingLabelColumn, NoValidRows, ShapeMismatchOnLoad, TruncatedRecord,
)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
STD_FLOOR = 1e-8


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    task: str = "classification"
    classes: int = 2
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.targets[idx], self.split, self.task, self.classes,
                       self.mean, self.std, self.skipped, dict(self.meta))


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and floored population std of an (N, C, H, W) array."""
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), STD_FLOOR)
    return mean, std


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)


# seeded shuffling -------------------------------------------------------------

def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays of a fresh permutation; the last batch may be short."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def holdout_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# CIFAR-10 -------------------------------------------------------------------------

def parse_cifar_records(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split raw CIFAR-10 binary bytes into labels (N,) and uint8 pixels (N, 3, 32, 32)."""
    if len(data) % CIFAR_RECORD:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if np.any(labels > 9):
        raise LabelOutOfRange(f"CIFAR-10 label {int(labels.max())} outside 0..9")
    return labels, raw[:, 1:].reshape((-1,) + CIFAR_SHAPE).copy()


def _cifar_dir(root: Path) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILES[0]).exists() or (cand / CIFAR_TRAIN_FILES[0]).exists():
            return cand
    return root


def load_cifar10(root, split: str = "train", limit: int | None = None,
                 stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Load the official binary batches from ``root``.

    Pixels are scaled to [0, 1] and standardised per channel with ``stats``
    when given (use the training split's), else with the loaded subset's own.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', not {split!r}")
    if limit is not None and limit <= 0:
        raise EmptyDataset("requested an empty CIFAR-10 subset")
    base = _cifar_dir(Path(root))
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    labels, pixels = [], []
    have = 0
    for name in names:
        path = base / name
        if not path.exists():
            raise MissingFile(f"missing CIFAR-10 batch file {path}")
        y, x = parse_cifar_records(path.read_bytes())
        labels.append(y)
        pixels.append(x)
        have += len(y)
        if limit is not None and have >= limit:
            break
    y = np.concatenate(labels)[:limit]
    x = np.concatenate(pixels)[:limit].astype(np.float64) / 255.0
    if len(y) == 0:
        raise EmptyDataset(f"no CIFAR-10 records under {base}")
    mean, std = stats if stats is not None else channel_stats(x)
    return Dataset(standardize(x, mean, std), y, split, "classification", 10, mean, std)


# synthetic stand-ins -------------------------------------------------------------

BLOB_SIZE = 16
BLOB_SQUARE = 4


def blob_location(k: int) -> tuple[int, int]:
    """Top-left corner of class ``k``'s square on a 4x4 grid of cells."""
    cells = BLOB_SIZE // BLOB_SQUARE
    return (k // cells) * BLOB_SQUARE, (k % cells) * BLOB_SQUARE


def synth_blobs(n: int, classes: int = 4, seed: int = 0, noise: float = 0.1,
                split: str = "train") -> Dataset:
    """(n, 3, 16, 16) images: a bright 4x4 square at a class-specific cell plus Gaussian noise."""
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    if not 1 <= classes <= (BLOB_SIZE // BLOB_SQUARE) ** 2:
        raise ValueError(f"synth_blobs supports 1..16 classes, got {classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    x = np.zeros((n, 3, BLOB_SIZE, BLOB_SIZE))
    for i, k in enumerate(labels):
        r, c = blob_location(int(k))
        x[i, :, r:r + BLOB_SQUARE, c:c + BLOB_SQUARE] = 1.0
    if noise > 0:
        x += rng.normal(0.0, noise, size=x.shape)
    return Dataset(x, labels.astype(np.int64), split, "classification", classes,
                   np.zeros(3), np.ones(3), meta={"noise": noise})


def render_mask(shapes, h: int, w: int) -> np.ndarray:
    """Rasterise ``("rect", r0, c0, r1, c1)`` (half-open) and ``("disc", cy, cx, radius)`` shapes."""
    mask = np.zeros((h, w), dtype=np.float64)
    rr, cc = np.mgrid[0:h, 0:w]
    for shape in shapes:
        if shape[0] == "rect":
            _, r0, c0, r1, c1 = shape
            mask[max(r0, 0):r1, max(c0, 0):c1] = 1.0
        elif shape[0] == "disc":
            _, cy, cx, rad = shape
            mask[(rr - cy) ** 2 + (cc - cx) ** 2 <= rad ** 2] = 1.0
        else:
            raise ValueError(f"unknown shape {shape[0]!r}")
    return mask


def random_shapes(rng: np.random.Generator, h: int, w: int, max_shapes: int = 2) -> list[tuple]:
    shapes = []
    for _ in range(rng.integers(1, max_shapes + 1)):
        if rng.random() < 0.5:
            rh = int(rng.integers(2, max(3, h // 2)))
            rw = int(rng.integers(2, max(3, w // 2)))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            shapes.append(("rect", r0, c0, r0 + rh, c0 + rw))
        else:
            rad = float(rng.uniform(1.5, min(h, w) / 4))
            shapes.append(("disc", float(rng.uniform(rad, h - rad)),
                           float(rng.uniform(rad, w - rad)), rad))
    return shapes


def synth_masks(n: int, h: int = 16, w: int = 16, seed: int = 0, noise: float = 0.1,
                split: str = "train") -> Dataset:
    """Grayscale (n, 1, h, w) images of random rectangles/discs with exact binary masks."""
    if n <= 0:
        raise EmptyDataset("synth_masks needs n >= 1")
    if h < 8 or w < 8:
        raise ValueError("synth_masks needs h, w >= 8")
    rng = np.random.default_rng(seed)
    masks = np.stack([render_mask(random_shapes(rng, h, w), h, w) for _ in range(n)])[:, None]
    images = masks + (rng.normal(0.0, noise, size=masks.shape) if noise > 0 else 0.0)
    return Dataset(images, masks, split, "segmentation", 2, np.zeros(1), np.ones(1),
                   meta={"noise": noise})


# flow CSV ------------------------------------------------------------------------

BENIGN = "BENIGN"


def _parse_label(cell: str) -> int | None:
    v = cell.strip()
    if v in ("0", "1"):
        return int(v)
    if v == "":
        return None
    try:
        f = float(v)
    except ValueError:
        return 0 if v.upper() == BENIGN else 1
    return int(f) if f in (0.0, 1.0) else None


def read_flows_csv(path, label_column: str = "Label", feature_columns=None):
    """Parse a flow CSV into raw (features (N, F), labels (N,), skipped rows, column names).

    Header cells are whitespace-stripped. Rows with a missing, non-numeric or
    non-finite feature cell (or an unusable label) are skipped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise NoValidRows(f"{path} is empty") from None
        if label_column not in header:
            raise MissingLabelColumn(f"label column {label_column!r} not in header")
        li = header.index(label_column)
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise MissingLabelColumn(f"feature columns not in header: {missing}")
        fi = [header.index(c) for c in feature_columns]
        rows, labels, skipped = [], [], 0
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError
                feats = [float(row[i]) for i in fi]
                if not all(math.isfinite(v) for v in feats):
                    raise ValueError
                label = _parse_label(row[li])
                if label is None:
                    raise ValueError
            except ValueError:
                skipped += 1
                continue
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise NoValidRows(f"{path} has no valid rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), skipped, list(feature_columns)


def column_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def flows_dataset(features: np.ndarray, labels: np.ndarray, stats=None, split="train",
                  skipped: int = 0, columns=None) -> Dataset:
    mean, std = stats if stats is not None else column_stats(features)
    z = (features - mean) / std
    return Dataset(z.reshape(len(z), 1, 1, -1), labels, split, "classification", 2, mean, std,
                   skipped, meta={"columns": columns or []})


def load_flows_csv(path, label_column: str = "Label", feature_columns=None, stats=None) -> Dataset:
    """Standardised flow features shaped (N, 1, 1, F) with binary labels."""
    x, y, skipped, cols = read_flows_csv(path, label_column, feature_columns)
    return flows_dataset(x, y, stats, "train", skipped, cols)


def data_root() -> Path:
    return Path(os.environ.get("MIA_DATA_DIR", "data"))


# checkpoints ----------------------------------------------------------------------

MAGIC = b"MIACKPT1"
ARCH_ENTRY = "__arch__"
_ARCH_IDS = {"mini_cnn": 0, "mini_segnet": 1, "flow_cnn": 2}


def _arch_vector(m: Model) -> np.ndarray:
    C, H, W = m.input_shape
    return np.array([_ARCH_IDS[m.arch], C, H, W, m.classes, m.reduction, int(m.bias), m.seed],
                    dtype=np.float64)


def encode_checkpoint(m: Model) -> bytes:
    """Serialise ``m``: magic, variant tag, entries, CRC-32 (all little-endian)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    tag = m.variant.encode("utf-8")
    buf.write(struct.pack("<I", len(tag)) + tag)
    entries = [(ARCH_ENTRY, _arch_vector(m))] + sorted(m.params.items())
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(m: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(m))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumMismatch("checkpoint ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a MIACKPT1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC-32 does not match its contents")
    r = _Reader(body)
    r.take(len(MAGIC))
    (tlen,) = r.unpack("<I")
    tag = r.take(tlen).decode("utf-8")
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<Q")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    return tag, entries


def load_checkpoint(path, into: Model | None = None) -> Model:
    """Rebuild the saved model, or load into ``into`` after checking tag and shapes."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such checkpoint: {path}")
    tag, entries = decode_checkpoint(path.read_bytes())
    arch = entries.pop(ARCH_ENTRY, None)
    if into is None:
        if arch is None:
            raise ShapeMismatchOnLoad("checkpoint lacks an architecture entry")
        a = [int(v) for v in arch]
        name = {v: k for k, v in _ARCH_IDS.items()}[a[0]]
        model = build_model(name, tuple(a[1:4]), a[4], tag, reduction=a[5], seed=a[7], bias=bool(a[6]))
    else:
        if into.variant != tag:
            raise ShapeMismatchOnLoad(f"checkpoint variant {tag!r} != model variant {into.variant!r}")
        model = into.copy()
    if set(entries) != set(model.params):
        raise ShapeMismatchOnLoad("checkpoint parameter names do not match the model")
    for name, arr in entries.items():
        if arr.shape != model.params[name].shape:
            raise ShapeMismatchOnLoad(f"{name}: checkpoint {arr.shape} vs model {model.params[name].shape}")
        model.params[name] = arr
    return model
