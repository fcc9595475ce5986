"""Labelled datasets, their container format and synthetic desk-scale generators.

Container layout: ``BSTD1\\n``, one line of JSON header, then two blobs each
preceded by a little-endian uint64 byte length: features as little-endian
float32 in (example, *shape) order and labels as little-endian uint16.
External data can be imported by building a ``Dataset`` from numpy arrays
and calling ``save_dataset``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn import datasets as skdata

MAGIC = "BSTD1"
KINDS = ("two-moons", "gaussian-blobs", "rings")
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.shape[0] != y.shape[0] or y.ndim != 1:
            raise ValueError("features and labels disagree on example count")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite features")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def save_dataset(ds: Dataset, path, provenance: Optional[dict] = None) -> None:
    header = {"magic": MAGIC, "version": 1, "count": len(ds), "shape": list(ds.shape),
              "num_classes": ds.num_classes}
    if provenance:
        header["provenance"] = provenance
    feats = ds.features.astype("<f4").tobytes()
    labels = ds.labels.astype("<u2").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC.encode() + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in (feats, labels):
            f.write(struct.pack("<Q", len(blob)) + blob)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or raw[:first] != MAGIC.encode() or second < 0:
        raise DatasetFormatError(f"{path}: not a dataset container")
    try:
        header = json.loads(raw[first + 1:second])
        count, shape, classes = int(header["count"]), tuple(header["shape"]), int(header["num_classes"])
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetFormatError(f"{path}: malformed header: {e}") from None
    pos = second + 1
    blobs = []
    for dtype, n in (("<f4", count * math.prod(shape)), ("<u2", count)):
        if pos + 8 > len(raw):
            raise DatasetFormatError(f"{path}: payload length mismatch")
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if nbytes != n * np.dtype(dtype).itemsize or pos + nbytes > len(raw):
            raise DatasetFormatError(f"{path}: payload length mismatch")
        blobs.append(np.frombuffer(raw, dtype=dtype, count=n, offset=pos))
        pos += nbytes
    if pos != len(raw):
        raise DatasetFormatError(f"{path}: payload length mismatch (trailing bytes)")
    try:
        return Dataset(blobs[0].reshape((count,) + shape), blobs[1].astype(np.int64), classes)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from None


def generate(kind: str, n: int, noise: float, seed: int) -> Dataset:
    """Deterministic synthetic 2-D classification problem."""
    if n < 10:
        raise ValueError("need at least 10 examples")
    if kind == "two-moons":
        x, y = skdata.make_moons(n_samples=n, noise=noise, random_state=seed)
        classes = 2
    elif kind == "rings":
        x, y = skdata.make_circles(n_samples=n, noise=noise, factor=0.5, random_state=seed)
        classes = 2
    elif kind == "gaussian-blobs":
        classes = 3
        x, y = skdata.make_blobs(n_samples=n, centers=classes, cluster_std=1.0 + 4.0 * noise,
                                 random_state=seed)
        x = x / np.abs(x).max()
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    return Dataset(x, y, classes)


def split(ds: Dataset, seed: int, fractions=(0.6, 0.2, 0.2)) -> dict[str, Dataset]:
    """Seeded shuffle followed by contiguous train/val/test cuts."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(fractions[0] * len(ds)))
    n_val = int(round(fractions[1] * len(ds)))
    cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return {name: ds.subset(np.sort(idx)) for name, idx in zip(SPLITS, cuts)}


def split_paths(out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {name: out_dir / f"{name}.bsd" for name in SPLITS}
