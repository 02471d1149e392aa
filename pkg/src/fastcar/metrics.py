"""Classification and regression metrics plus the per-model report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

WALL_CLOCK_FIELDS = ("wall_clock_seconds",)


def _pair(preds, truth, dtype=float):
    p = np.asarray(preds, dtype=dtype).ravel()
    t = np.asarray(truth, dtype=dtype).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def accuracy(preds, truth) -> float:
    """Percent of exact class matches."""
    p, t = _pair(preds, truth, dtype=int)
    return 100.0 * float(np.count_nonzero(p == t)) / p.size


def mse(preds, truth) -> float:
    p, t = _pair(preds, truth)
    return float(np.mean((p - t) ** 2))


def mae(preds, truth) -> float:
    p, t = _pair(preds, truth)
    return float(np.mean(np.abs(p - t)))


def _ape(preds, truth) -> np.ndarray:
    p, t = _pair(preds, truth)
    if np.any(t == 0):
        raise ValueError("MAPE undefined: a true value is zero")
    return 100.0 * np.abs(t - p) / np.abs(t)


def mape(preds, truth) -> float:
    """Mean absolute percentage error, in percent."""
    return float(np.mean(_ape(preds, truth)))


def within_fraction(preds, truth, pct: float = 8.0) -> float:
    """Fraction of samples whose absolute percentage error is at most ``pct``."""
    return float(np.mean(_ape(preds, truth) <= pct))


def range_collapsed(preds, truth, min_fraction: float = 0.05) -> bool:
    """True when predictions span less than ``min_fraction`` of the label range."""
    p, t = _pair(preds, truth)
    label_span = float(t.max() - t.min())
    if label_span == 0:
        return False
    return float(p.max() - p.min()) < min_fraction * label_span


@dataclass
class MetricsReport:
    accuracy_pct: float
    mse: float
    mae: float
    mape_pct: float
    within_8pct_fraction: float
    wall_clock_seconds: float = 0.0
    range_collapse: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy_pct", "mse", "mae", "mape_pct", "within_8pct_fraction", "wall_clock_seconds"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")

    @classmethod
    def compute(cls, pred_classes, true_classes, pred_y, true_y, wall_clock_seconds=0.0, **extra):
        return cls(
            accuracy_pct=accuracy(pred_classes, true_classes),
            mse=mse(pred_y, true_y),
            mae=mae(pred_y, true_y),
            mape_pct=mape(pred_y, true_y),
            within_8pct_fraction=within_fraction(pred_y, true_y, 8.0),
            wall_clock_seconds=float(wall_clock_seconds),
            range_collapse=range_collapsed(pred_y, true_y),
            extra=extra,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)


def write_metrics(path, report: MetricsReport, **header) -> None:
    """Metrics document: header fields (model, seed, config_hash, ...) plus
    every report field, as sorted-key JSON."""
    doc = {**header, **report.to_dict()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "accuracy_pct" not in doc:
        raise ValueError(f"{path}: not a metrics document")
    return doc


def mean_pm_std(values) -> str:
    """``m±s`` with two decimals, sample standard deviation."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return "nan±nan"
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return f"{v.mean():.2f}±{sd:.2f}"
