"""Synthetic class/property datasets, CSV I/O and stratified splitting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

LABEL_MIN, LABEL_MAX = 179.0, 1146.0
BAND_WIDTH = 250.0


class LabeledSample(NamedTuple):
    features: np.ndarray
    class_id: int
    y: float


@dataclass
class Dataset:
    """Column-wise container: X (n, d), classes (n,), y (n,)."""

    X: np.ndarray
    classes: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.classes = np.asarray(self.classes, dtype=int)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.X.shape}")
        n = len(self.X)
        if self.classes.shape != (n,) or self.y.shape != (n,):
            raise ValueError("features, classes and y must have the same length")
        if n and (self.classes.min() < 0):
            raise ValueError("class ids must be >= 0")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(self.X[i], int(self.classes[i]), float(self.y[i]))

    def __getitem__(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.classes[idx], self.y[idx])

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.classes.max()) + 1 if len(self) else 0

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "Dataset":
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.stack([np.asarray(s.features, dtype=float) for s in samples]),
            np.array([s.class_id for s in samples]),
            np.array([s.y for s in samples]),
        )


def default_class_ranges(n_classes: int = 6) -> list[tuple[float, float]]:
    """Equal-width, partially overlapping bands spanning [179, 1146]."""
    if n_classes == 1:
        return [(LABEL_MIN, LABEL_MAX)]
    width = min(BAND_WIDTH, LABEL_MAX - LABEL_MIN)
    step = (LABEL_MAX - LABEL_MIN - width) / (n_classes - 1)
    ranges = []
    for k in range(n_classes):
        lo = LABEL_MIN + k * step
        ranges.append((lo, LABEL_MAX if k == n_classes - 1 else lo + width))
    return ranges


@dataclass
class SynthConfig:
    n_classes: int = 6
    samples_per_class: int = 756
    feature_dim: int = 32
    class_ranges: list[tuple[float, float]] | None = None
    class_scale: float = 0.5
    signal_scale: float = 0.1
    noise_sigma: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.feature_dim <= self.n_classes:
            raise ValueError("feature_dim must exceed n_classes (indicator block plus signal block)")
        if self.class_scale <= 0 or self.signal_scale <= 0:
            raise ValueError("class_scale and signal_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.class_ranges is None:
            self.class_ranges = default_class_ranges(self.n_classes)
        self.class_ranges = [(float(a), float(b)) for a, b in self.class_ranges]
        if len(self.class_ranges) != self.n_classes:
            raise ValueError("need one class range per class")
        for lo, hi in self.class_ranges:
            if not 0 < lo <= hi:
                raise ValueError(f"class range ({lo}, {hi}) must be positive with lo <= hi")


def generate(cfg: SynthConfig) -> Dataset:
    """Class-balanced synthetic set.

    Features are a class-indicator block followed by a signal block
    ``g(y) * direction`` where ``g`` maps the global label range affinely onto
    [-1, 1] and ``direction`` is a seeded unit vector. The indicator block has
    height ``class_scale``, the signal block is multiplied by ``signal_scale``,
    and gaussian noise of ``noise_sigma`` is added to every feature.
    """
    root = np.random.SeedSequence(cfg.seed)
    dir_seq, *class_seqs = root.spawn(cfg.n_classes + 1)
    direction = np.random.default_rng(dir_seq).normal(size=cfg.feature_dim - cfg.n_classes)
    direction /= np.linalg.norm(direction)

    g_lo = min(lo for lo, _ in cfg.class_ranges)
    g_hi = max(hi for _, hi in cfg.class_ranges)
    g_span = g_hi - g_lo if g_hi > g_lo else 1.0

    Xs, cs, ys = [], [], []
    n = cfg.samples_per_class
    for k, seq in enumerate(class_seqs):
        rng = np.random.default_rng(seq)
        lo, hi = cfg.class_ranges[k]
        y = rng.uniform(lo, hi, size=n)
        g = 2.0 * (y - g_lo) / g_span - 1.0
        X = np.zeros((n, cfg.feature_dim))
        X[:, k] = cfg.class_scale
        X[:, cfg.n_classes:] = cfg.signal_scale * g[:, None] * direction
        if cfg.noise_sigma > 0:
            X += rng.normal(scale=cfg.noise_sigma, size=X.shape)
        Xs.append(X)
        cs.append(np.full(n, k))
        ys.append(y)
    return Dataset(np.concatenate(Xs), np.concatenate(cs), np.concatenate(ys))


def split(data: Dataset, ratios: Sequence[int] = (5, 1, 1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Per-class stratified shuffle split.

    A class with n samples gives floor(n*r_val/R) validation and
    floor(n*r_test/R) test rows; the rest (including any remainder) train.
    """
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    total = sum(ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in np.unique(data.classes):
        idx = np.flatnonzero(data.classes == c)
        if len(idx) < total:
            raise ValueError(f"class {c} has {len(idx)} samples, needs at least {total} to split")
        idx = idx[rng.permutation(len(idx))]
        n_val = math.floor(len(idx) * ratios[1] / total)
        n_test = math.floor(len(idx) * ratios[2] / total)
        n_train = len(idx) - n_val - n_test
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(data[np.sort(np.concatenate(p))] for p in parts)


class CSVFormatError(ValueError):
    pass


def save_csv(data: Dataset, path) -> None:
    d = data.feature_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["class", "y"])
        for row, c, y in zip(data.X, data.classes, data.y):
            w.writerow([repr(float(v)) for v in row] + [int(c), repr(float(y))])


def load_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-2:] != ["class", "y"]:
            raise CSVFormatError(f"{path}: header must be f0,...,f{{d-1}},class,y; got {header}")
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)]
        if header[:d] != expected:
            raise CSVFormatError(f"{path}: feature columns must be named {expected[0]}..{expected[-1]}")

        X = []
        cs = []
        ys = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 2:
                raise CSVFormatError(f"{path}: line {line}: expected {d + 2} columns, got {len(row)}")
            try:
                feats = [float(v) for v in row[:d]]
                y = float(row[-1])
                cf = float(row[-2])
            except ValueError as exc:
                raise CSVFormatError(f"{path}: line {line}: non-numeric cell ({exc})") from None
            if not (all(map(math.isfinite, feats)) and math.isfinite(y)):
                raise CSVFormatError(f"{path}: line {line}: non-finite value")
            if not math.isfinite(cf) or cf != int(cf) or cf < 0:
                raise CSVFormatError(f"{path}: line {line}: class must be a non-negative integer, got {row[-2]!r}")
            X.append(feats)
            cs.append(int(cf))
            ys.append(y)
    if not X:
        raise CSVFormatError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(cs), np.array(ys))
