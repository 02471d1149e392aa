"""Hybrid-label codec.

A classification label and a regression label are folded into one real
number: each class's regression range is shifted by a class constant so the
shifted ranges are pairwise disjoint, then the whole layout is centred on
zero and optionally shrunk by a global scale factor. Decoding looks up which
interval a value falls in and undoes the shift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "ClassRange",
    "TransformSpec",
    "compute_class_ranges",
    "solve_offsets",
    "transform",
    "inverse_transform",
    "decode",
    "decode_many",
    "shrink",
    "in_any_interval",
]


@dataclass(frozen=True)
class ClassRange:
    class_id: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"class {self.class_id}: lo {self.lo} > hi {self.hi}")


@dataclass(frozen=True)
class TransformSpec:
    offsets: Mapping[int, float]
    intervals: Mapping[int, tuple[float, float]]
    center: float
    scale: float = 1.0
    margin: float = 2.0
    # ascending class ids, cached for vectorised decoding
    _order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if set(self.offsets) != set(self.intervals):
            raise ValueError("offsets and intervals must cover the same classes")
        if not self.offsets:
            raise ValueError("spec needs at least one class")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "_order", tuple(sorted(self.offsets)))

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self._order

    def effective_offset(self, class_id: int) -> float:
        """Net additive shift in original units (class constant minus centre)."""
        return self.offsets[class_id] - self.center

    def to_dict(self) -> dict:
        return {
            "offsets": {str(k): float(v) for k, v in sorted(self.offsets.items())},
            "intervals": {str(k): [float(a), float(b)] for k, (a, b) in sorted(self.intervals.items())},
            "center": float(self.center),
            "scale": float(self.scale),
            "margin": float(self.margin),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TransformSpec":
        missing = {"offsets", "intervals", "center", "scale", "margin"} - set(doc)
        if missing:
            raise ValueError(f"transform spec document missing fields: {sorted(missing)}")
        return cls(
            offsets={int(k): float(v) for k, v in doc["offsets"].items()},
            intervals={int(k): (float(v[0]), float(v[1])) for k, v in doc["intervals"].items()},
            center=float(doc["center"]),
            scale=float(doc["scale"]),
            margin=float(doc["margin"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "TransformSpec":
        return cls.from_dict(json.loads(text))


def compute_class_ranges(samples: Iterable) -> dict[int, ClassRange]:
    """Min/max regression label per class.

    ``samples`` is any iterable of objects with ``class_id`` and ``y``
    attributes (``LabeledSample`` or a ``Dataset``).
    """
    lo: dict[int, float] = {}
    hi: dict[int, float] = {}
    for s in samples:
        c, y = int(s.class_id), float(s.y)
        if c in lo:
            lo[c] = min(lo[c], y)
            hi[c] = max(hi[c], y)
        else:
            lo[c] = hi[c] = y
    if not lo:
        raise ValueError("no samples")
    return {c: ClassRange(c, lo[c], hi[c]) for c in sorted(lo)}


def _shift(y, offset, center, scale):
    # single expression shared by transform() and interval construction so that
    # range endpoints land exactly on interval endpoints
    return (y + offset - center) * scale


def solve_offsets(ranges: Mapping[int, ClassRange], margin: float = 2.0) -> TransformSpec:
    """Stack class ranges end to end in ascending class order, ``margin`` apart,
    then centre the stack about zero."""
    if not ranges:
        raise ValueError("no class ranges")
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if margin == 0 and len(ranges) >= 2:
        raise ValueError("degenerate margin: adjacent intervals would share a boundary")

    order = sorted(ranges)
    first = ranges[order[0]]
    span = sum(ranges[c].hi - ranges[c].lo for c in order) + margin * (len(order) - 1)
    center = first.lo + span / 2.0

    offsets = {order[0]: 0.0}
    intervals = {order[0]: (_shift(first.lo, 0.0, center, 1.0), _shift(first.hi, 0.0, center, 1.0))}
    prev_hi = intervals[order[0]][1]
    for c in order[1:]:
        r = ranges[c]
        off = prev_hi + margin + center - r.lo
        # rounding can leave the float gap a few ulps short of the margin
        ulp = np.spacing(max(abs(r.lo), abs(off), abs(center), abs(prev_hi)))
        while _shift(r.lo, off, center, 1.0) - prev_hi < margin:
            off += ulp
        offsets[c] = float(off)
        intervals[c] = (_shift(r.lo, off, center, 1.0), _shift(r.hi, off, center, 1.0))
        prev_hi = intervals[c][1]
    return TransformSpec(offsets=offsets, intervals=intervals, center=center, scale=1.0, margin=margin)


def transform(y, class_id, spec: TransformSpec):
    """Map regression label(s) ``y`` of class(es) ``class_id`` to hybrid label(s).

    Accepts scalars or equal-length arrays.
    """
    if np.ndim(class_id) == 0:
        c = int(class_id)
        if c not in spec.offsets:
            raise KeyError(f"unknown class {c}")
        return _shift(y, spec.offsets[c], spec.center, spec.scale)
    offs = _lookup(spec.offsets, np.asarray(class_id))
    return _shift(np.asarray(y, dtype=float), offs, spec.center, spec.scale)


def inverse_transform(h, class_id, spec: TransformSpec):
    if np.ndim(class_id) == 0:
        c = int(class_id)
        if c not in spec.offsets:
            raise KeyError(f"unknown class {c}")
        return h / spec.scale - spec.offsets[c] + spec.center
    offs = _lookup(spec.offsets, np.asarray(class_id))
    return np.asarray(h, dtype=float) / spec.scale - offs + spec.center


def _lookup(table: Mapping[int, float], classes: np.ndarray) -> np.ndarray:
    unknown = set(np.unique(classes).tolist()) - set(table)
    if unknown:
        raise KeyError(f"unknown class(es) {sorted(unknown)}")
    return np.array([table[int(c)] for c in classes], dtype=float)


def decode_many(h, spec: TransformSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decode`. Returns (class_ids, y) arrays."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    order = np.array(spec.class_ids)
    lo = np.array([spec.intervals[c][0] for c in order])
    hi = np.array([spec.intervals[c][1] for c in order])
    # distance to each interval, zero inside it
    dist = np.maximum(np.maximum(lo[None, :] - h[:, None], h[:, None] - hi[None, :]), 0.0)
    # argmin returns the first minimum, i.e. the lower class id on ties
    classes = order[np.argmin(dist, axis=1)]
    return classes, inverse_transform(h, classes, spec)


def decode(h: float, spec: TransformSpec) -> tuple[int, float]:
    """Recover (class_id, y) from a hybrid value.

    Values outside every interval go to the class with the nearest interval
    boundary; equidistant values go to the lower class id.
    """
    classes, ys = decode_many([h], spec)
    return int(classes[0]), float(ys[0])


def in_any_interval(h, spec: TransformSpec) -> np.ndarray:
    h = np.atleast_1d(np.asarray(h, dtype=float))
    inside = np.zeros(h.shape, dtype=bool)
    for lo, hi in spec.intervals.values():
        inside |= (h >= lo) & (h <= hi)
    return inside


def shrink(spec: TransformSpec, factor: float) -> TransformSpec:
    if not 0 < factor < 1:
        raise ValueError(f"shrink factor must be in (0, 1), got {factor}")
    return TransformSpec(
        offsets=dict(spec.offsets),
        intervals={c: (lo * factor, hi * factor) for c, (lo, hi) in spec.intervals.items()},
        center=spec.center,
        scale=spec.scale * factor,
        margin=spec.margin,
    )
