"""Hard-parameter-sharing multi-task baseline.

One relu trunk feeds a K-logit classification head and a width-1 regression
head. The two task losses are balanced by one of four weighting schemes:

* EW  - equal weights.
* UW  - homoscedastic uncertainty weighting (Kendall, Gal & Cipolla, 2018):
        exp(-s1) * L_cls + 0.5 * exp(-s2) * L_reg + 0.5 * (s1 + s2), with the
        log-variances s1, s2 learned alongside the network.
* DWA - dynamic weight average (Liu, Johns & Davison, 2019): per-epoch weights
        K * softmax(r / T) with r_k the ratio of task k's last two epoch losses.
* GLS - geometric loss strategy (Chennupati et al., 2019): sqrt(L_cls * L_reg).

The regression head is trained on labels in their original units.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .metrics import MetricsReport
from .nn import (
    DenseNet,
    DivergenceError,
    cross_entropy,
    cross_entropy_grad,
    minibatches,
    mse,
    mse_grad,
)
from .pipeline import TrainConfig

log = logging.getLogger(__name__)

SCHEMES = ("ew", "uw", "dwa", "gls")
N_TASKS = 2


class WeightingScheme:
    """Base class. ``weights`` are d(total)/d(L_k), the multipliers applied to
    each task's gradient."""

    name = "base"

    def combine(self, l_cls: float, l_reg: float, epoch: int) -> tuple[float, tuple[float, float]]:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def param_grads(self, l_cls: float, l_reg: float) -> dict[str, np.ndarray]:
        return {}

    def end_epoch(self, l_cls: float, l_reg: float) -> None:
        pass


class EqualWeighting(WeightingScheme):
    name = "ew"

    def combine(self, l_cls, l_reg, epoch):
        return l_cls + l_reg, (1.0, 1.0)


class UncertaintyWeighting(WeightingScheme):
    name = "uw"

    def __init__(self, log_vars=(0.0, 0.0)):
        self.log_vars = np.array(log_vars, dtype=float)

    def combine(self, l_cls, l_reg, epoch):
        s1, s2 = self.log_vars
        w = (float(np.exp(-s1)), 0.5 * float(np.exp(-s2)))
        return w[0] * l_cls + w[1] * l_reg + 0.5 * (s1 + s2), w

    def parameters(self):
        return {"uw.log_vars": self.log_vars}

    def param_grads(self, l_cls, l_reg):
        s1, s2 = self.log_vars
        return {"uw.log_vars": np.array([0.5 - np.exp(-s1) * l_cls, 0.5 - 0.5 * np.exp(-s2) * l_reg])}


class DynamicWeightAverage(WeightingScheme):
    name = "dwa"

    def __init__(self, temperature: float = 2.0):
        self.temperature = temperature
        self.history: list[tuple[float, float]] = []

    def weights_for(self, epoch: int) -> tuple[float, float]:
        if epoch < 2 or len(self.history) < 2:
            return 1.0, 1.0
        prev, prev2 = self.history[-1], self.history[-2]
        r = np.array([prev[0] / prev2[0], prev[1] / prev2[1]]) / self.temperature
        e = np.exp(r - r.max())
        # extreme loss ratios underflow exp(); keep every task weight positive
        w = np.maximum(N_TASKS * e / e.sum(), np.finfo(float).tiny)
        return float(w[0]), float(w[1])

    def combine(self, l_cls, l_reg, epoch):
        w = self.weights_for(epoch)
        return w[0] * l_cls + w[1] * l_reg, w

    def end_epoch(self, l_cls, l_reg):
        self.history.append((l_cls, l_reg))


class GeometricLossStrategy(WeightingScheme):
    name = "gls"

    def combine(self, l_cls, l_reg, epoch):
        if l_cls <= 0 or l_reg <= 0:
            raise ValueError("degenerate geometric loss: a task loss is zero")
        total = float(np.sqrt(l_cls * l_reg))
        return total, (0.5 * total / l_cls, 0.5 * total / l_reg)


def make_scheme(name: str) -> WeightingScheme:
    key = name.lower()
    table = {
        "ew": EqualWeighting,
        "uw": UncertaintyWeighting,
        "dwa": DynamicWeightAverage,
        "gls": GeometricLossStrategy,
    }
    if key not in table:
        raise ValueError(f"unknown weighting scheme {name!r}; choose from {', '.join(SCHEMES)}")
    return table[key]()


def combined_loss(scheme: WeightingScheme, l_cls: float, l_reg: float, epoch: int):
    """(total, (w_cls, w_reg)) for the given task losses."""
    if not (np.isfinite(l_cls) and np.isfinite(l_reg)) or l_cls < 0 or l_reg < 0:
        raise ValueError(f"task losses must be finite and >= 0, got {l_cls}, {l_reg}")
    return scheme.combine(l_cls, l_reg, epoch)


# model and training -------------------------------------------------------------

def build_mtl_model(input_dim: int, n_classes: int, cfg: TrainConfig) -> DenseNet:
    # trunk is drawn first, so it matches the FastCAR regressor for the same seed
    return DenseNet.build(input_dim, cfg.hidden, {"cls": n_classes, "reg": 1}, cfg.init_rng())


def _task_losses(model: DenseNet, X: np.ndarray, classes: np.ndarray, y: np.ndarray):
    outs, cache = model.forward_cached(X)
    return outs, cache, cross_entropy(outs["cls"], classes), mse(outs["reg"][:, 0], y)


def mtl_step_grads(model: DenseNet, scheme: WeightingScheme, X, classes, y, epoch: int):
    """Combined loss, task losses and gradients for network and scheme parameters."""
    outs, cache, l_cls, l_reg = _task_losses(model, X, classes, y)
    if not (np.isfinite(l_cls) and np.isfinite(l_reg)):
        raise DivergenceError()
    total, (w_cls, w_reg) = combined_loss(scheme, l_cls, l_reg, epoch)
    head_grads = {
        "cls": w_cls * cross_entropy_grad(outs["cls"], classes),
        "reg": w_reg * mse_grad(outs["reg"], y[:, None]),
    }
    grads = model.backward(cache, head_grads)
    grads.update(scheme.param_grads(l_cls, l_reg))
    return total, l_cls, l_reg, grads


@dataclass
class MTLResult:
    model: DenseNet
    scheme: WeightingScheme
    report: MetricsReport
    log: list = field(default_factory=list)


class MTLDivergence(DivergenceError):
    def __init__(self, scheme: str, epoch: int):
        RuntimeError.__init__(self, f"divergence in scheme {scheme.upper()} at epoch {epoch}")
        self.epoch = epoch
        self.scheme = scheme


def train_mtl(train: Dataset, val: Dataset, cfg: TrainConfig, scheme, test: Dataset | None = None) -> MTLResult:
    """Train the two-head model; evaluate on ``test`` (``val`` if omitted)."""
    if isinstance(scheme, str):
        scheme = make_scheme(scheme)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    n_classes = int(max(train.classes.max(), val.classes.max())) + 1
    t0 = time.perf_counter()
    model = build_mtl_model(train.feature_dim, n_classes, cfg)
    params = {**model.parameters(), **scheme.parameters()}
    opt = cfg.optimizer()
    sched = cfg.scheduler()
    rng = cfg.shuffle_rng()
    history = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        seen = 0
        try:
            for idx in minibatches(len(train), cfg.batch_size, rng):
                total, l_cls, l_reg, grads = mtl_step_grads(
                    model, scheme, train.X[idx], train.classes[idx], train.y[idx], epoch
                )
                if not np.isfinite(total):
                    raise DivergenceError()
                opt.step(params, grads)
                sums += np.array([total, l_cls, l_reg]) * len(idx)
                seen += len(idx)
            _, _, v_cls, v_reg = _task_losses(model, val.X, val.classes, val.y)
            v_total, _ = combined_loss(scheme, v_cls, v_reg, epoch)
            if not np.isfinite(v_total):
                raise DivergenceError()
        except (DivergenceError, FloatingPointError, ValueError) as exc:
            if isinstance(exc, ValueError) and "degenerate" in str(exc):
                raise
            raise MTLDivergence(scheme.name, epoch) from exc
        avg = sums / seen
        scheme.end_epoch(avg[1], avg[2])
        history.append((epoch, *avg.tolist(), v_total, opt.lr))
        opt.lr = sched.step(v_total, opt.lr)
    elapsed = time.perf_counter() - t0

    held_out = test if test is not None else val
    outs = model.forward(held_out.X)
    report = MetricsReport.compute(
        outs["cls"].argmax(axis=1), held_out.classes, outs["reg"][:, 0], held_out.y, elapsed
    )
    return MTLResult(model, scheme, report, history)


@dataclass
class SweepRow:
    scheme: str
    report: MetricsReport | None = None
    error: str | None = None


def sweep(train: Dataset, val: Dataset, test: Dataset, cfg: TrainConfig, schemes=SCHEMES) -> list[SweepRow]:
    """Train one model per scheme on identical data and seed. Failures are
    recorded in their row and do not stop the sweep."""
    if not schemes:
        raise ValueError("sweep needs at least one scheme")
    rows = []
    for name in schemes:
        try:
            result = train_mtl(train, val, cfg, name, test=test)
            rows.append(SweepRow(name, result.report))
        except (RuntimeError, ValueError) as exc:
            log.warning("scheme %s failed: %s", name, exc)
            rows.append(SweepRow(name, error=str(exc)))
    return rows


HEATMAP_HEADER = ["scheme", "accuracy_pct", "mse", "mape_pct", "wall_clock_s"]


def write_heatmap_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEATMAP_HEADER)
        for row in rows:
            r = row.report
            if r is None:
                w.writerow([row.scheme, "nan", "nan", "nan", "nan"])
            else:
                w.writerow([row.scheme] + [f"{v:.4f}" for v in (r.accuracy_pct, r.mse, r.mape_pct, r.wall_clock_seconds)])
