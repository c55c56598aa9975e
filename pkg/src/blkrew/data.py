"""Dataset sources: seeded Gaussian blobs, CSV files and IDX (MNIST-style) files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    classes: int = 3
    features: int = 16
    samples: int = 600
    noise: float = 1.0
    seed: int = 0
    path: str | None = None
    label_path: str | None = None


def make_blobs(classes: int, features: int, samples: int, noise: float = 1.0,
               seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Class centers drawn from N(0, I); each sample adds N(0, noise^2 I).

    Labels are balanced (``i % classes``) and then shuffled.
    """
    if classes < 2 or features < 1 or samples < classes:
        raise DatasetError("need classes >= 2, features >= 1 and samples >= classes")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, features))
    labels = rng.permutation(np.arange(samples) % classes)
    x = centers[labels] + noise * rng.standard_normal((samples, features))
    return x, labels.astype(np.int64)


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """One sample per line: feature values then an integer label.

    Blank lines and ``#`` comments are skipped; a non-numeric first line is
    taken as a header.
    """
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                values = [float(p) for p in parts]
            except ValueError:
                if not rows and not labels:
                    continue
                raise DatasetError(f"{path}:{lineno}: non-numeric field")
            if len(values) < 2:
                raise DatasetError(f"{path}:{lineno}: need at least one feature and a label")
            if rows and len(values) - 1 != len(rows[0]):
                raise DatasetError(f"{path}:{lineno}: expected {len(rows[0])} features, "
                                   f"got {len(values) - 1}")
            if values[-1] != int(values[-1]) or values[-1] < 0:
                raise DatasetError(f"{path}:{lineno}: label must be a nonnegative integer")
            rows.append(values[:-1])
            labels.append(int(values[-1]))
    if not rows:
        raise DatasetError(f"{path}: no samples")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise DatasetError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    count = int(np.prod(dims)) if dims else 1
    body = raw[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise DatasetError(f"{path}: expected {count * dtype.itemsize} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    codes = {v: k for k, v in _IDX_TYPES.items()}
    dt = np.dtype(arr.dtype).newbyteorder(">").str
    dt = dt.replace("|", ">")
    if dt not in codes:
        raise DatasetError(f"dtype {arr.dtype} has no IDX code")
    header = bytes([0, 0, codes[dt], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_idx(images, labels) -> tuple[np.ndarray, np.ndarray]:
    raw = read_idx(images)
    y = read_idx(labels)
    if raw.shape[0] != y.shape[0]:
        raise DatasetError("image and label counts differ")
    x = raw.reshape(raw.shape[0], -1).astype(np.float64)
    if raw.dtype == np.dtype(">u1"):
        x /= 255.0
    return x, y.astype(np.int64)


def load(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.source == "synthetic":
        x, y = make_blobs(spec.classes, spec.features, spec.samples, spec.noise, spec.seed)
    elif spec.source == "csv":
        if not spec.path:
            raise DatasetError("csv source needs a data path")
        x, y = load_csv(spec.path)
    elif spec.source == "idx":
        if not spec.path or not spec.label_path:
            raise DatasetError("idx source needs data and labels paths")
        x, y = load_idx(spec.path, spec.label_path)
    else:
        raise DatasetError(f"unknown dataset source {spec.source!r}")
    if spec.source != "synthetic" and y.max() >= spec.classes:
        raise DatasetError(f"labels reach {y.max()}, but classes = {spec.classes}")
    return x, y
