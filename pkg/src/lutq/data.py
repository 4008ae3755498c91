"""Dataset ingestion: IDX file pairs, CSV tables and seeded synthetic generators."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataError(f"{path}: truncated IDX header at byte offset {len(data)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DataError(f"{path}: bad IDX magic {data[:4].hex()} at byte offset 0")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated IDX dimensions at byte offset {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(data) != need:
        raise DataError(f"{path}: expected {need} bytes, file has {len(data)} "
                        f"(mismatch from byte offset {min(len(data), need)})")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)


def load_idx_pair(images, labels, num_classes=None) -> Dataset:
    x = read_idx(images).astype(np.float64)
    y = read_idx(labels)
    if y.ndim != 1 or len(y) != len(x):
        raise DataError(f"{labels}: label file holds {y.shape}, images hold {len(x)} samples")
    if x.ndim == 3:
        x = x[:, None]
    return Dataset(x, _check_labels(y.astype(np.int64), num_classes, str(labels)), _classes(y, num_classes))


def load_csv(path, num_classes=None) -> Dataset:
    """``features..., label`` rows; a non-numeric first row is treated as a header."""
    raw = Path(path).read_bytes()
    rows, labels = [], []
    offset = 0
    width = None
    for lineno, line in enumerate(raw.splitlines(keepends=True)):
        start, offset = offset, offset + len(line)
        text = line.decode("utf-8", errors="replace").strip()
        if not text:
            continue
        fields = next(csv.reader(io.StringIO(text)))
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            if lineno == 0:
                continue
            raise DataError(f"{path}: non-numeric field on line {lineno + 1} (byte offset {start})") from None
        if width is None:
            width = len(vals)
            if width < 2:
                raise DataError(f"{path}: need at least one feature and a label (byte offset {start})")
        if len(vals) != width:
            raise DataError(f"{path}: line {lineno + 1} has {len(vals)} fields, expected {width} "
                            f"(byte offset {start})")
        if not np.all(np.isfinite(vals)):
            raise DataError(f"{path}: non-finite value on line {lineno + 1} (byte offset {start})")
        if vals[-1] != int(vals[-1]) or vals[-1] < 0:
            raise DataError(f"{path}: label {fields[-1]!r} on line {lineno + 1} is not a "
                            f"non-negative integer (byte offset {start})")
        rows.append(vals[:-1])
        labels.append(int(vals[-1]))
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    return Dataset(np.asarray(rows), _check_labels(y, num_classes, str(path)), _classes(y, num_classes))


def _classes(y, num_classes):
    return int(num_classes) if num_classes else int(np.max(y)) + 1


def _check_labels(y, num_classes, where):
    if num_classes is not None:
        bad = np.flatnonzero((y < 0) | (y >= num_classes))
        if bad.size:
            raise DataError(f"{where}: label {y[bad[0]]} at sample {bad[0]} outside 0..{num_classes - 1}")
    return y


def two_spirals(n: int, noise: float = 0.0, seed: int = 0, turns: float = 1.5) -> Dataset:
    """Two interleaved Archimedean spirals, ``n`` points split evenly between classes."""
    rng = np.random.default_rng(seed)
    half = n // 2
    counts = (half, n - half)
    xs, ys = [], []
    for cls, m in enumerate(counts):
        t = np.sqrt(rng.uniform(0.0, 1.0, m)) * turns * 2 * np.pi
        radius = t / (turns * 2 * np.pi)
        angle = t + cls * np.pi
        pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        xs.append(pts + noise * rng.normal(size=pts.shape))
        ys.append(np.full(m, cls))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(n)
    return Dataset(x[order], y[order].astype(np.int64), 2)


def blobs(n: int, noise: float = 1.0, seed: int = 0, classes: int = 3, dim: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, (classes, dim))
    y = rng.integers(0, classes, n)
    x = centers[y] + noise * rng.normal(size=(n, dim))
    return Dataset(x, y.astype(np.int64), classes)


SYNTHETIC = {"two-spirals": two_spirals, "blobs": blobs}


def normalize(train: Dataset, *others: Dataset):
    """z-score every feature with the training statistics (constant features are centred only)."""
    axes = (0,) if train.x.ndim == 2 else tuple(i for i in range(train.x.ndim) if i != 1)
    mean = train.x.mean(axis=axes, keepdims=True)
    std = train.x.std(axis=axes, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return [Dataset((s.x - mean) / std, s.y, s.num_classes) for s in (train,) + others]


def split(data: Dataset, val_fraction: float, seed: int):
    if not 0.0 <= val_fraction < 1.0:
        raise DataError("val_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_val = int(round(val_fraction * len(data)))
    val, tr = order[:n_val], order[n_val:]
    return (Dataset(data.x[tr], data.y[tr], data.num_classes),
            Dataset(data.x[val], data.y[val], data.num_classes))


def load_dataset(source: dict, seed: int = 0):
    """Return normalized ``(train, validation)`` sets.

    ``source`` keys: ``kind`` (``idx``, ``csv`` or ``synthetic``) and then
    ``images``/``labels``, ``path``, or ``name``/``size``/``noise``; optional
    ``val_fraction`` (default 0.2), ``num_classes`` and, for IDX/CSV, separate
    ``val_images``/``val_labels`` or ``val_path`` files.
    """
    kind = source.get("kind", "synthetic")
    num_classes = source.get("num_classes")
    num_classes = int(num_classes) if num_classes not in (None, "") else None
    val_fraction = float(source.get("val_fraction", 0.2))
    val = None
    if kind == "idx":
        data = load_idx_pair(source["images"], source["labels"], num_classes)
        if source.get("val_images"):
            val = load_idx_pair(source["val_images"], source["val_labels"], data.num_classes)
    elif kind == "csv":
        data = load_csv(source["path"], num_classes)
        if source.get("val_path"):
            val = load_csv(source["val_path"], data.num_classes)
    elif kind == "synthetic":
        name = source.get("name", "two-spirals")
        if name not in SYNTHETIC:
            raise DataError(f"unknown synthetic dataset {name!r}; choose from {sorted(SYNTHETIC)}")
        data = SYNTHETIC[name](int(source.get("size", 1000)), float(source.get("noise", 0.0)),
                               int(source.get("data_seed", seed)))
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    if val is None:
        data, val = split(data, val_fraction, seed)
    if val.num_classes != data.num_classes:
        val = Dataset(val.x, val.y, data.num_classes)
    train, val = normalize(data, val)
    return train, val
