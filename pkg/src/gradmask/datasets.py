"""Synthetic classification data in [0, 1]^D with disjoint train/test draws."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, fmt_float

_SPLIT_STREAM = {"train": 1, "test": 2}


@dataclass(frozen=True)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    split: str
    generator_spec: dict = field(default_factory=dict)
    num_classes: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"X must be (N, D) and y (N,), got {X.shape} and {y.shape}")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")
        if self.split not in _SPLIT_STREAM:
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.num_classes:
            object.__setattr__(self, "num_classes", int(y.max()) + 1 if y.size else 0)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def gen_blobs(D: int, C: int, n_per_class: int, spread: float, seed: int, split: str = "train") -> LabeledDataset:
    """C isotropic Gaussian clusters; centres are shared between splits, samples are not."""
    if D < 2 or C < 2 or n_per_class < 1 or not spread > 0:
        raise ValueError("gen_blobs needs D >= 2, C >= 2, n_per_class >= 1 and spread > 0")
    centers = _rng(seed, 0).uniform(0.25, 0.75, size=(C, D))
    rng = _rng(seed, _SPLIT_STREAM[split])
    y = np.repeat(np.arange(C), n_per_class)
    X = np.clip(centers[y] + spread * rng.standard_normal((y.size, D)), 0.0, 1.0)
    spec = {"name": "blobs", "D": D, "C": C, "n_per_class": n_per_class, "spread": spread, "seed": seed}
    return LabeledDataset(X, y, split, spec, C)


RING_RADII = (0.15, 0.35)


def gen_rings(D: int, n_per_class: int, noise: float, seed: int, split: str = "train") -> LabeledDataset:
    """Two concentric rings in the first two coordinates; the rest is narrow uniform noise."""
    if D < 2 or n_per_class < 1 or noise < 0:
        raise ValueError("gen_rings needs D >= 2, n_per_class >= 1 and noise >= 0")
    rng = _rng(seed, _SPLIT_STREAM[split])
    y = np.repeat(np.arange(2), n_per_class)
    theta = rng.uniform(0.0, 2 * np.pi, size=y.size)
    r = np.asarray(RING_RADII)[y] + noise * rng.standard_normal(y.size)
    X = rng.uniform(0.45, 0.55, size=(y.size, D))
    X[:, 0] = 0.5 + r * np.cos(theta)
    X[:, 1] = 0.5 + r * np.sin(theta)
    spec = {"name": "rings", "D": D, "n_per_class": n_per_class, "noise": noise, "seed": seed}
    return LabeledDataset(np.clip(X, 0.0, 1.0), y, split, spec, 2)


def make_dataset(spec: dict, split: str) -> LabeledDataset:
    kind = spec.get("name", "blobs")
    args = {k: v for k, v in spec.items() if k != "name"}
    if kind == "blobs":
        return gen_blobs(split=split, **args)
    if kind == "rings":
        return gen_rings(split=split, **args)
    raise ValueError(f"unknown dataset {kind!r}")


def subsample(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    if n > len(ds) or n < 1:
        raise ValueError(f"cannot draw {n} examples from a dataset of {len(ds)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return LabeledDataset(ds.X[idx], ds.y[idx], ds.split, {**ds.generator_spec, "subsample": [n, seed]}, ds.num_classes)


def to_csv(ds: LabeledDataset) -> str:
    out = _io.StringIO()
    out.write(",".join([f"x{i}" for i in range(ds.dim)] + ["label"]) + "\n")
    for row, label in zip(ds.X, ds.y):
        out.write(",".join([fmt_float(v) for v in row] + [str(int(label))]) + "\n")
    return out.getvalue()


def export_csv(ds: LabeledDataset, path) -> None:
    atomic_write_bytes(Path(path), to_csv(ds).encode())


def import_csv(path, split: str = "test") -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(len(header) - 1)]:
        raise ValueError("CSV header must be x0..x{D-1},label")
    X = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    return LabeledDataset(X, y, split, {"name": "csv", "path": str(path)})
