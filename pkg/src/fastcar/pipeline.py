"""FastCAR training procedure.

1. define hybrid labels from the training set's class ranges;
2. run a one-epoch gradient test and shrink the labels until the mean
   absolute gradient falls under the threshold;
3. train a single-head regressor on the accepted hybrid labels;
4. decode predictions back to (class, value).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .labels import (
    TransformSpec,
    compute_class_ranges,
    decode_many,
    in_any_interval,
    shrink,
    solve_offsets,
    transform,
)
from .metrics import MetricsReport
from .nn import Adam, DenseNet, DivergenceError, PlateauScheduler, loss_and_grads, minibatches

log = logging.getLogger(__name__)

HEAD = "out"
_MSE = {HEAD: ("mse", 1.0)}


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-4
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    min_lr: float = 0.0
    grad_threshold: float = 2.0
    shrink_factor: float = 0.5
    max_label_iterations: int = 10
    margin: float = 2.0
    seed: int = 0
    batch_size: int = 64
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if not 0 < self.shrink_factor < 1:
            raise ValueError("shrink_factor must be in (0, 1)")
        if self.grad_threshold <= 0:
            raise ValueError("grad_threshold must be positive")
        if self.max_label_iterations < 0:
            raise ValueError("max_label_iterations must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden must list at least one positive layer width")

    def optimizer(self) -> Adam:
        return Adam(lr=self.lr, weight_decay=self.weight_decay)

    def scheduler(self) -> PlateauScheduler:
        return PlateauScheduler(factor=self.scheduler_factor, patience=self.scheduler_patience, min_lr=self.min_lr)

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def shuffle_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1])


@dataclass
class GradientReport:
    avg_grad_magnitude: float
    threshold: float = 2.0
    passed: bool = False
    iterations_used: int = 0
    final_scale: float = 1.0

    def __post_init__(self):
        self.passed = bool(self.avg_grad_magnitude < self.threshold)


class LabelTuningError(RuntimeError):
    def __init__(self, report: GradientReport):
        super().__init__(
            f"labels not tunable: mean |grad| {report.avg_grad_magnitude:.4g} >= {report.threshold} "
            f"after {report.iterations_used} shrinks (scale {report.final_scale:.4g})"
        )
        self.report = report


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    elapsed_seconds: float


@dataclass
class FastCARResult:
    model: DenseNet
    spec: TransformSpec
    log: list[EpochRecord]
    label_report: GradientReport
    wall_clock_seconds: float
    optimizer: Adam = field(repr=False, default=None)
    scheduler: PlateauScheduler = field(repr=False, default=None)


def build_regressor(input_dim: int, cfg: TrainConfig) -> DenseNet:
    return DenseNet.build(input_dim, cfg.hidden, {HEAD: 1}, cfg.init_rng())


def hybrid_targets(data: Dataset, spec: TransformSpec) -> np.ndarray:
    return transform(data.y, data.classes, spec)


def one_epoch_test(train: Dataset, spec: TransformSpec, cfg: TrainConfig) -> GradientReport:
    """Train a fresh regressor for one epoch on the hybrid labels and report
    the mean absolute parameter gradient over all optimiser steps."""
    if len(train) == 0:
        raise ValueError("empty training set")
    targets = hybrid_targets(train, spec)
    net = build_regressor(train.feature_dim, cfg)
    params = net.parameters()
    n_params = net.n_parameters()
    opt = cfg.optimizer()
    per_step = []
    try:
        for idx in minibatches(len(train), cfg.batch_size, cfg.shuffle_rng()):
            _, grads, _ = loss_and_grads(net, train.X[idx], {HEAD: targets[idx]}, _MSE)
            per_step.append(sum(float(np.abs(g).sum()) for g in grads.values()) / n_params)
            opt.step(params, grads)
        # every step covers the same parameter set, so this is the mean over all scalars
        avg = float(np.mean(per_step))
        if not np.isfinite(avg):
            avg = float("inf")
    except DivergenceError:
        avg = float("inf")
    return GradientReport(avg, threshold=cfg.grad_threshold, final_scale=spec.scale)


def fit_labels(train: Dataset, cfg: TrainConfig) -> tuple[TransformSpec, GradientReport]:
    """Solve class offsets, then shrink until the one-epoch test passes."""
    spec = solve_offsets(compute_class_ranges(train), cfg.margin)
    shrinks = 0
    while True:
        report = one_epoch_test(train, spec, cfg)
        report.iterations_used = shrinks
        log.info("label test: scale=%.6g mean|grad|=%.4g pass=%s", spec.scale, report.avg_grad_magnitude, report.passed)
        if report.passed:
            return spec, report
        if shrinks >= cfg.max_label_iterations:
            raise LabelTuningError(report)
        spec = shrink(spec, cfg.shrink_factor)
        shrinks += 1


def _hybrid_mse(net: DenseNet, X: np.ndarray, h: np.ndarray) -> float:
    pred = net.forward(X)[HEAD][:, 0]
    return float(np.mean((pred - h) ** 2))


def train_fastcar(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    spec: TransformSpec | None = None,
) -> FastCARResult:
    """Fit the labels (unless ``spec`` is given) and train for ``cfg.epochs``.

    The scheduler monitors validation MSE in hybrid units. Wall-clock covers
    label fitting and training.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    t0 = time.perf_counter()
    if spec is None:
        spec, report = fit_labels(train, cfg)
    else:
        report = GradientReport(float("nan"), cfg.grad_threshold, final_scale=spec.scale)
    h_train = hybrid_targets(train, spec)
    h_val = hybrid_targets(val, spec)

    net = build_regressor(train.feature_dim, cfg)
    params = net.parameters()
    opt = cfg.optimizer()
    sched = cfg.scheduler()
    rng = cfg.shuffle_rng()
    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        try:
            for idx in minibatches(len(train), cfg.batch_size, rng):
                loss, grads, _ = loss_and_grads(net, train.X[idx], {HEAD: h_train[idx]}, _MSE)
                opt.step(params, grads)
                total += loss * len(idx)
                seen += len(idx)
        except DivergenceError:
            raise DivergenceError(epoch=epoch) from None
        val_loss = _hybrid_mse(net, val.X, h_val)
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch=epoch)
        history.append(EpochRecord(epoch, total / seen, val_loss, opt.lr, time.perf_counter() - t0))
        opt.lr = sched.step(val_loss, opt.lr)
    elapsed = time.perf_counter() - t0
    return FastCARResult(net, spec, history, report, elapsed, opt, sched)


def predict_hybrid(model: DenseNet, X) -> np.ndarray:
    return model.forward(X)[HEAD][:, 0]


def predict_many(model: DenseNet, spec: TransformSpec, X) -> tuple[np.ndarray, np.ndarray]:
    return decode_many(predict_hybrid(model, X), spec)


def predict(model: DenseNet, spec: TransformSpec, x) -> tuple[int, float]:
    """Decode the network's hybrid output for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict takes one feature vector; use predict_many for batches")
    classes, ys = predict_many(model, spec, x)
    return int(classes[0]), float(ys[0])


def evaluate(model: DenseNet, spec: TransformSpec, test: Dataset, wall_clock_seconds: float = 0.0) -> MetricsReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    h = predict_hybrid(model, test.X)
    classes, ys = decode_many(h, spec)
    return MetricsReport.compute(
        classes, test.classes, ys, test.y, wall_clock_seconds,
        in_interval_fraction=float(in_any_interval(h, spec).mean()),
    )


def write_log(path, history: list[EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,elapsed_seconds\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.elapsed_seconds:.6f}\n")
