"""Small dense network with hand-written backprop, Adam and plateau scheduling.

Everything is plain numpy so gradients can be inspected directly (the label
tuning loop needs them) and checked against finite differences.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = "fastcar-ckpt-1"

ACTIVATIONS = ("relu", "identity")


class DivergenceError(RuntimeError):
    """Raised when a loss becomes non-finite."""

    def __init__(self, message="divergence", epoch=None):
        super().__init__(message if epoch is None else f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


def glorot_layer(fan_in: int, fan_out: int, rng: np.random.Generator, activation="relu") -> Layer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Layer(
        weight=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
        bias=np.zeros(fan_out),
        activation=activation,
    )


@dataclass
class DenseNet:
    """Shared relu trunk feeding one or more linear heads."""

    trunk: list[Layer]
    heads: dict[str, Layer]

    def __post_init__(self):
        if not self.heads:
            raise ValueError("network needs at least one head")
        for a, b in zip(self.trunk, self.trunk[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        width = self.trunk[-1].fan_out if self.trunk else None
        for name, head in self.heads.items():
            if width is not None and head.fan_in != width:
                raise ValueError(f"head {name!r} expects {head.fan_in} inputs, trunk gives {width}")
        ins = {head.fan_in for head in self.heads.values()}
        if not self.trunk and len(ins) != 1:
            raise ValueError("headless trunk needs heads with one common input width")

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden: Sequence[int],
        head_widths: Mapping[str, int],
        rng: np.random.Generator,
    ) -> "DenseNet":
        """Glorot-uniform initialised net. Trunk layers are drawn before heads,
        in order, so two nets built from the same seed share the trunk."""
        dims = [input_dim, *hidden]
        trunk = [glorot_layer(i, o, rng, "relu") for i, o in zip(dims, dims[1:])]
        heads = {name: glorot_layer(dims[-1], w, rng, "identity") for name, w in head_widths.items()}
        return cls(trunk, heads)

    @property
    def input_dim(self) -> int:
        if self.trunk:
            return self.trunk[0].fan_in
        return next(iter(self.heads.values())).fan_in

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array. The arrays are the live parameters, not copies."""
        out = {}
        for i, layer in enumerate(self.trunk):
            out[f"trunk.{i}.weight"] = layer.weight
            out[f"trunk.{i}.bias"] = layer.bias
        for name, layer in self.heads.items():
            out[f"head.{name}.weight"] = layer.weight
            out[f"head.{name}.bias"] = layer.bias
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.trunk],
            {k: Layer(l.weight.copy(), l.bias.copy(), l.activation) for k, l in self.heads.items()},
        )

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of dimension {self.input_dim}, got shape {x.shape}")
        return x

    def forward(self, x) -> dict[str, np.ndarray]:
        """Batch forward pass; ``x`` is (n, d) or a single (d,) vector.
        Returns head -> (n, width)."""
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        """Forward pass that also returns the activations needed by backward()."""
        x = self._check_input(x)
        acts = [x]
        pre = []
        h = x
        for layer in self.trunk:
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
            acts.append(h)
        outs = {}
        for name, layer in self.heads.items():
            outs[name] = h @ layer.weight.T + layer.bias
        return outs, (acts, pre)

    def backward(self, cache, head_grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients given dLoss/dOutput per head (each (n, width))."""
        acts, pre = cache
        feats = acts[-1]
        grads: dict[str, np.ndarray] = {}
        d_feat = np.zeros_like(feats)
        for name, layer in self.heads.items():
            g = head_grads.get(name)
            if g is None:
                grads[f"head.{name}.weight"] = np.zeros_like(layer.weight)
                grads[f"head.{name}.bias"] = np.zeros_like(layer.bias)
                continue
            grads[f"head.{name}.weight"] = g.T @ feats
            grads[f"head.{name}.bias"] = g.sum(axis=0)
            d_feat += g @ layer.weight
        delta = d_feat
        for i in reversed(range(len(self.trunk))):
            layer = self.trunk[i]
            if layer.activation == "relu":
                delta = delta * (pre[i] > 0)
            grads[f"trunk.{i}.weight"] = delta.T @ acts[i]
            grads[f"trunk.{i}.bias"] = delta.sum(axis=0)
            if i:
                delta = delta @ layer.weight
        return grads


# losses ---------------------------------------------------------------------

def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    return float(np.mean((pred - np.asarray(target, dtype=float)) ** 2))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, classes) -> float:
    """Mean negative log-softmax at the true class. Accepts a single logit
    vector with an int class, or (n, K) logits with (n,) classes."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim == 1:
        logits = logits[None, :]
    classes = np.atleast_1d(np.asarray(classes, dtype=int))
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(classes)), classes].mean())


def cross_entropy_grad(logits: np.ndarray, classes: np.ndarray) -> np.ndarray:
    p = np.exp(log_softmax(logits))
    p[np.arange(len(classes)), classes] -= 1.0
    return p / len(classes)


LOSSES = {"mse", "ce"}


def loss_and_grads(
    net: DenseNet,
    x,
    targets: Mapping[str, np.ndarray],
    loss_spec: Mapping[str, tuple[str, float]],
):
    """Weighted multi-head loss and exact parameter gradients.

    ``loss_spec`` maps head name -> (kind, weight) with kind "mse" or "ce".
    For "mse" the target has the head's output shape (a 1-d target is
    accepted for width-1 heads); for "ce" it is an int class vector.

    Returns (total_loss, grads, per_head_losses).
    """
    x = net._check_input(x)
    if len(x) == 0:
        raise ValueError("empty batch")
    outs, cache = net.forward_cached(x)
    head_grads = {}
    per_head = {}
    total = 0.0
    for name, (kind, weight) in loss_spec.items():
        out = outs[name]
        if kind == "mse":
            t = np.asarray(targets[name], dtype=float).reshape(out.shape)
            per_head[name] = mse(out, t)
            head_grads[name] = weight * mse_grad(out, t)
        elif kind == "ce":
            c = np.asarray(targets[name], dtype=int)
            per_head[name] = cross_entropy(out, c)
            head_grads[name] = weight * cross_entropy_grad(out, c)
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
        total += weight * per_head[name]
    if not np.isfinite(total):
        raise DivergenceError()
    return total, net.backward(cache, head_grads), per_head


# optimisation -----------------------------------------------------------------

@dataclass
class Adam:
    """Adam with decoupled weight decay (decay applied before the moment step)."""

    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        """Update ``params`` in place and return them."""
        if set(params) != set(grads):
            raise ValueError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


@dataclass
class PlateauScheduler:
    """Reduce the learning rate when a monitored loss stops improving."""

    factor: float = 0.1
    patience: int = 5
    min_lr: float = 0.0
    tolerance: float = 1e-12
    best: float = float("inf")
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must be in (0, 1)")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    def step(self, metric: float, lr: float) -> float:
        if metric < self.best - self.tolerance:
            self.best = metric
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# checkpoints --------------------------------------------------------------------

def save_checkpoint(path, net: DenseNet, opt: Adam | None = None,
                    sched: PlateauScheduler | None = None, extra: dict | None = None) -> None:
    arrays = {}
    meta = {
        "version": CHECKPOINT_VERSION,
        "trunk": [l.activation for l in net.trunk],
        "heads": {k: l.activation for k, l in net.heads.items()},
        "extra": extra or {},
    }
    for name, p in net.parameters().items():
        arrays[f"param/{name}"] = p
    if opt is not None:
        meta["adam"] = {k: getattr(opt, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step_count")}
        for name in opt.m:
            arrays[f"adam_m/{name}"] = opt.m[name]
            arrays[f"adam_v/{name}"] = opt.v[name]
    if sched is not None:
        meta["scheduler"] = {k: getattr(sched, k) for k in ("factor", "patience", "min_lr", "tolerance", "best", "bad_epochs")}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (net, adam or None, scheduler or None, extra dict)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        trunk = [
            Layer(z[f"param/trunk.{i}.weight"].copy(), z[f"param/trunk.{i}.bias"].copy(), act)
            for i, act in enumerate(meta["trunk"])
        ]
        heads = {
            k: Layer(z[f"param/head.{k}.weight"].copy(), z[f"param/head.{k}.bias"].copy(), act)
            for k, act in meta["heads"].items()
        }
        net = DenseNet(trunk, heads)
        opt = None
        if "adam" in meta:
            opt = Adam(**meta["adam"])
            for key in z.files:
                if key.startswith("adam_m/"):
                    name = key[len("adam_m/"):]
                    opt.m[name] = z[key].copy()
                    opt.v[name] = z[f"adam_v/{name}"].copy()
        sched = PlateauScheduler(**meta["scheduler"]) if "scheduler" in meta else None
    return net, opt, sched, meta["extra"]
