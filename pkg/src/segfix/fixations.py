"""Backtracking strongest-activation paths from output units to image pixels.

A fixation at some level names one unit of that level's tensor. Moving one
layer down, each fixation is replaced by the units below that contribute most
to it: for a conv or fc layer the contributions are the weight-times-input
products, for a pool layer the window values. ReLU layers pass fixations
through unchanged but drop units whose recorded activation is zero.

Levels follow :class:`~segfix.network.ActivationRecord`: level 0 is the image,
level ``i`` the output of layer ``i - 1``.
"""

from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .network import ActivationRecord, Network, center_tap, predict_segmentation
from .tensor import ConvParams, FCParams, PoolParams, unravel


class ShiftPolicy(enum.Enum):
    NONE = "none"
    PARTIAL = "partial"
    FULL = "full"

    def shifts(self, params: ConvParams) -> bool:
        """Whether a conv transition through ``params`` may move spatially."""
        if self is ShiftPolicy.FULL:
            return True
        if self is ShiftPolicy.PARTIAL:
            return params.dilation == 1
        return False


@dataclass(frozen=True)
class KStrategy:
    """How many contributors each fixation branches into.

    ``fixed``: always ``value``. ``fraction``: the fewest contributors holding
    ``value`` percent of the positive contribution, at most ``cap``.
    ``resolution``: ``value`` times the area ratio between the layer below and
    above (rounded up), at most ``cap``.
    """

    kind: str
    value: float
    cap: int | None = None

    def __post_init__(self):
        if self.kind == "fixed":
            if self.value < 1 or int(self.value) != self.value:
                raise ValueError(f"fixed k must be a positive integer, got {self.value}")
        elif self.kind == "fraction":
            if not 0 < self.value <= 100:
                raise ValueError(f"capture fraction must lie in (0, 100], got {self.value}")
        elif self.kind == "resolution":
            if self.value < 1 or int(self.value) != self.value:
                raise ValueError(f"base k must be a positive integer, got {self.value}")
        else:
            raise ValueError(f"unknown k strategy {self.kind!r}")

    @classmethod
    def fixed(cls, k: int) -> "KStrategy":
        return cls("fixed", k)

    @classmethod
    def capture(cls, percent: float, cap: int = 16) -> "KStrategy":
        return cls("fraction", percent, cap)

    @classmethod
    def resolution(cls, base_k: int, cap: int = 4) -> "KStrategy":
        return cls("resolution", base_k, cap)

    @classmethod
    def parse(cls, text: str) -> "KStrategy":
        """Parse ``fixed:K``, ``fraction:X[:CAP]`` or ``resolution:K[:CAP]``."""
        kind, _, rest = text.partition(":")
        parts = rest.split(":") if rest else []
        try:
            if kind == "fixed" and len(parts) == 1:
                return cls.fixed(int(parts[0]))
            if kind == "fraction" and len(parts) in (1, 2):
                return cls.capture(float(parts[0]), *(int(p) for p in parts[1:]))
            if kind == "resolution" and len(parts) in (1, 2):
                return cls.resolution(int(parts[0]), *(int(p) for p in parts[1:]))
        except ValueError as exc:
            raise ValueError(f"bad k strategy {text!r}: {exc}") from None
        raise ValueError(f"bad k strategy {text!r}")

    def choose(self, contributions: np.ndarray, area_below: int, area_above: int) -> int:
        if self.kind == "fixed":
            return int(self.value)
        if self.kind == "fraction":
            return min(k_for_fraction(contributions, self.value), self.cap)
        ratio = math.ceil(area_below / area_above)
        return min(int(self.value) * ratio, self.cap)


@dataclass(frozen=True)
class FixationPoint:
    level: int
    channel: int
    row: int
    col: int
    contribution: float

    @property
    def coord(self) -> tuple[int, int, int]:
        return self.channel, self.row, self.col


@dataclass(frozen=True)
class ImagePoint:
    row: int
    col: int
    contribution: float


@dataclass
class FixationSet:
    label: int
    points: list[ImagePoint]

    def to_json_records(self) -> list[dict]:
        return [
            {"label": self.label, "x": p.col, "y": p.row, "contribution": p.contribution}
            for p in self.points
        ]


def fixations_to_json(sets: Iterable[FixationSet]) -> str:
    records = [r for s in sets for r in s.to_json_records()]
    return json.dumps(records, indent=1) + "\n"


def top_k(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries, descending; ties keep lower index first."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    order = np.argsort(-values, kind="stable")[:k]
    return order, values[order]


def k_for_fraction(contributions, percent: float) -> int:
    """Smallest k whose top-k positive contributions reach ``percent`` of the positive total."""
    v = np.asarray(contributions, dtype=np.float64).reshape(-1)
    pos = np.sort(v[v > 0])[::-1]
    total = pos.sum()
    if total == 0:
        return 1
    target = percent / 100.0 * total
    cum = np.cumsum(pos)
    # slack absorbs rounding in the running sum; exact splits (e.g. 5 of 10 equal parts) must count
    k = int(np.searchsorted(cum, target - 1e-12 * total, side="left")) + 1
    return min(k, pos.size)


# -- per-unit contribution vectors -------------------------------------------------------------


def conv_contributions(coord, params: ConvParams, below: np.ndarray):
    """Receptive-field coordinates (N, 3) and their products kernel * input (N,)."""
    z, x, y = coord
    _, h, w = below.shape
    kh, kw = params.kernel_size
    d = params.dilation
    rows = x * params.stride - params.pad + np.arange(kh) * d
    cols = y * params.stride - params.pad + np.arange(kw) * d
    vr = (rows >= 0) & (rows < h)
    vc = (cols >= 0) & (cols < w)
    kern = params.kernel[z][:, vr][:, :, vc]
    patch = below[:, rows[vr]][:, :, cols[vc]]
    values = (kern * patch).reshape(-1)
    cc, rr, qq = np.meshgrid(np.arange(below.shape[0]), rows[vr], cols[vc], indexing="ij")
    coords = np.stack([cc.reshape(-1), rr.reshape(-1), qq.reshape(-1)], axis=1)
    return coords, values


def pool_contributions(coord, params: PoolParams, below: np.ndarray):
    z, x, y = coord
    _, h, w = below.shape
    rows = x * params.stride - params.pad + np.arange(params.window)
    cols = y * params.stride - params.pad + np.arange(params.window)
    rows = rows[(rows >= 0) & (rows < h)]
    cols = cols[(cols >= 0) & (cols < w)]
    rr, qq = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([np.full(rr.size, z), rr.reshape(-1), qq.reshape(-1)], axis=1)
    return coords, below[z][rr, qq].reshape(-1)


def fc_contributions(coord, params: FCParams, below: np.ndarray):
    j = coord[0]
    values = params.weight[j] * below.reshape(-1)
    coords = np.stack(np.unravel_index(np.arange(below.size), below.shape), axis=1)
    return coords, values


def contributions(net: Network, record: ActivationRecord, level: int, coord):
    """Contribution vector of unit ``coord`` at ``level`` over the level below.

    Returns ``None`` for ReLU layers, which have no contributors of their own.
    """
    layer = net.layers[level - 1]
    below = record.level(level - 1)
    if layer.kind == "conv":
        return conv_contributions(coord, layer.params, below)
    if layer.kind == "pool":
        return pool_contributions(coord, layer.params, below)
    if layer.kind == "fc":
        return fc_contributions(coord, layer.params, below)
    return None


def _merge(pairs) -> list[tuple[tuple[int, int, int], float]]:
    acc = defaultdict(list)
    for coord, value in pairs:
        acc[coord].append(value)
    return [(c, math.fsum(vs)) for c, vs in acc.items()]


def _select_conv(coord, params, below, coords, values, k, policy):
    idx, vals = top_k(values, k)
    chosen = [tuple(int(v) for v in coords[i]) for i in idx]
    if not policy.shifts(params):
        r, c = center_tap(params, coord[1], coord[2], below.shape)
        chosen = [(ch, r, c) for ch, _, _ in chosen]
    return _merge(zip(chosen, (float(v) for v in vals)))


def _select(coords, values, k):
    idx, vals = top_k(values, k)
    return [(tuple(int(v) for v in coords[i]), float(x)) for i, x in zip(idx, vals)]


def transition_fc(point, params: FCParams, below: np.ndarray, k: int):
    """Top-k contributors ``weight[j] * below`` of fc output unit ``point``."""
    coord = point.coord if isinstance(point, FixationPoint) else tuple(point)
    coords, values = fc_contributions(coord, params, below)
    return _select(coords, values, k)


def transition_conv(point, params: ConvParams, below: np.ndarray, k: int, policy: ShiftPolicy):
    """Top-k receptive-field contributors of a conv unit, after the shift policy.

    Without shift every chosen tap keeps its channel but moves to the unit's
    central tap position; coinciding results merge with summed contributions.
    """
    coord = point.coord if isinstance(point, FixationPoint) else tuple(point)
    coords, values = conv_contributions(coord, params, below)
    return _select_conv(coord, params, below, coords, values, k, policy)


def transition_pool(point, params: PoolParams, below: np.ndarray, k: int):
    coord = point.coord if isinstance(point, FixationPoint) else tuple(point)
    coords, values = pool_contributions(coord, params, below)
    return _select(coords, values, k)


# -- seeds ------------------------------------------------------------------------------------


def seed_segmentation(record: ActivationRecord, label: int) -> list[FixationPoint]:
    scores = record.scores
    if not 0 <= label < scores.shape[0]:
        raise ValueError(f"label {label} outside [0, {scores.shape[0]})")
    pred = predict_segmentation(scores)
    rows, cols = np.nonzero(pred == label)
    return [
        FixationPoint(record.depth, label, int(r), int(c), float(scores[label, r, c]))
        for r, c in zip(rows, cols)
    ]


def seed_classification(record: ActivationRecord, label: int | None = None) -> FixationPoint:
    scores = record.scores
    if scores.shape[1:] != (1, 1):
        raise ValueError(f"classification seed needs a vector output, got shape {scores.shape}")
    logits = scores[:, 0, 0]
    if label is None:
        label = int(np.argmax(logits))
    if not 0 <= label < logits.size:
        raise ValueError(f"class {label} outside [0, {logits.size})")
    return FixationPoint(record.depth, label, 0, 0, float(logits[label]))


# -- backtracking -----------------------------------------------------------------------------


def _step(net, record, level, coord, strategy, policy):
    layer = net.layers[level - 1]
    below = record.level(level - 1)
    coords, values = contributions(net, record, level, coord)
    above = record.level(level)
    k = strategy.choose(values, below.shape[1] * below.shape[2], above.shape[1] * above.shape[2])
    if layer.kind == "conv":
        return _select_conv(coord, layer.params, below, coords, values, k, policy)
    return _select(coords, values, k)


def backtrack_levels(
    net: Network,
    record: ActivationRecord,
    seeds: Iterable[FixationPoint],
    strategy: KStrategy = KStrategy.fixed(1),
    policy: ShiftPolicy = ShiftPolicy.FULL,
    workers: int = 1,
) -> list[dict[tuple[int, int, int], float]]:
    """Fixations at every level, from the image (index 0) to the scores.

    Each level maps unit coordinates to accumulated contributions. Duplicate
    fixations merge by summing with ``math.fsum``, which makes the result
    independent of the order (and thread count) in which paths are expanded.
    """
    depth = record.depth
    top = _merge(((p.channel, p.row, p.col), p.contribution) for p in seeds)
    levels: list[dict] = [dict() for _ in range(depth + 1)]
    levels[depth] = dict(sorted(top))
    points = levels[depth]
    pool_exec = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for level in range(depth, 0, -1):
            layer = net.layers[level - 1]
            if layer.kind == "relu":
                act = record.level(level)
                nxt = {c: v for c, v in points.items() if act[c] > 0}
            else:
                coords = sorted(points)
                args = [(net, record, level, c, strategy, policy) for c in coords]
                if pool_exec is not None:
                    children = list(pool_exec.map(lambda a: _step(*a), args))
                else:
                    children = [_step(*a) for a in args]
                nxt = dict(sorted(_merge(pair for group in children for pair in group)))
            levels[level - 1] = nxt
            points = nxt
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    return levels


def collapse_channels(points: dict[tuple[int, int, int], float]) -> list[ImagePoint]:
    acc = defaultdict(list)
    for (_, r, c), v in points.items():
        acc[(r, c)].append(v)
    return [ImagePoint(r, c, math.fsum(vs)) for (r, c), vs in sorted(acc.items())]


def backtrack(
    net: Network,
    record: ActivationRecord,
    seeds: Iterable[FixationPoint],
    strategy: KStrategy = KStrategy.fixed(1),
    policy: ShiftPolicy = ShiftPolicy.FULL,
    label: int | None = None,
    workers: int = 1,
) -> FixationSet:
    """Image-plane fixations for ``seeds``; pixels reached through several channels count once."""
    seeds = list(seeds)
    if label is None:
        label = seeds[0].channel if seeds else -1
    levels = backtrack_levels(net, record, seeds, strategy, policy, workers)
    return FixationSet(label, collapse_channels(levels[0]))


# -- post-processing --------------------------------------------------------------------------


def density_map(points: Iterable, height: int, width: int, sigma: float, normalize: bool = True):
    """Sum of isotropic Gaussians, one per fixation, each of unit mass on the pixel grid.

    With ``normalize`` the map is scaled so its maximum is 1. Returns (1, h, w).
    """
    if sigma <= 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    total = np.zeros((height, width))
    for p in points:
        g = np.exp(-((rows - p.row) ** 2 + (cols - p.col) ** 2) / (2.0 * sigma * sigma))
        total += g / g.sum()
    if normalize and total.max() > 0:
        total = total / total.max()
    return total[None]


def outlier_filter(points: list[ImagePoint]) -> list[ImagePoint]:
    """Drop points farther from the centroid than median + 2 * MAD of the distances."""
    points = list(points)
    if len(points) <= 2:
        return points
    xy = np.array([[p.row, p.col] for p in points], dtype=np.float64)
    dist = np.hypot(*(xy - xy.mean(axis=0)).T)
    med = np.median(dist)
    mad = np.median(np.abs(dist - med))
    keep = dist <= med + 2.0 * mad
    return [p for p, k in zip(points, keep) if k]
